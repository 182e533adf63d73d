//! Planted-signal video/text pairs.
//!
//! Every video is Gaussian noise of shape `[T x G x G x C]` carrying one of
//! `M` patterns. Pattern `m` owns a sign code `x_m ∈ {±1}^C`; it is written
//! into a random `k x k` patch of `signal_frames` random frames as `+a·x_m` on
//! the upper half of the patch rows and `-a·x_m` on the lower half. The patch
//! sums to zero per channel, and each video is finally standardised per
//! channel, so global and per-frame channel means carry no pattern identity.
//! Because every channel receives the same `+a` bump somewhere in the patch,
//! a global max per channel does not reveal the code either.
//!
//! The text for a pair is the pattern's prototype (a random zero-sum unit
//! vector) plus zero-sum Gaussian noise, renormalised.

use std::collections::HashSet;
use std::ops::Range;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::retrieval::{stack, Embedding};
use crate::tensor::Tensor;

/// Independent RNG streams derived from one seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub const DATA_STREAM: u64 = 1;
pub const INIT_STREAM: u64 = 2;
pub const BATCH_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub patterns: usize,
    pub patch: usize,
    pub amplitude: f64,
    pub signal_frames: usize,
    pub text_noise: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticPairSet {
    pub videos: Vec<Tensor>,
    pub texts: Vec<Embedding>,
    pub labels: Vec<usize>,
    pub codes: Vec<Vec<f64>>,
    pub prototypes: Vec<Embedding>,
    pub train: Range<usize>,
    pub test: Range<usize>,
    pub spec: SignalSpec,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    labels: Vec<usize>,
    train: Range<usize>,
    test: Range<usize>,
    spec: SignalSpec,
}

fn sign_codes<R: Rng>(m: usize, c: usize, rng: &mut R) -> Vec<Vec<f64>> {
    // The last channel is pinned to +1 so no code is the negation of another.
    let bits = (c - 1).min(62);
    let mut seen = HashSet::new();
    let mut perm: Vec<usize> = (0..c).collect();
    perm.shuffle(rng);
    let mut codes = Vec::with_capacity(m);
    while codes.len() < m {
        let word: u64 = rng.random::<u64>() & ((1u64 << bits) - 1);
        let tail: Vec<bool> = (bits..c - 1).map(|_| rng.random()).collect();
        if !seen.insert((word, tail.clone())) {
            continue;
        }
        let mut raw = vec![1.0; c];
        for (j, r) in raw.iter_mut().enumerate().take(c - 1) {
            let bit = if j < bits { (word >> j) & 1 == 1 } else { tail[j - bits] };
            *r = if bit { 1.0 } else { -1.0 };
        }
        codes.push(perm.iter().map(|&p| raw[p]).collect());
    }
    codes
}

fn centred_gaussian<R: Rng>(c: usize, std: f64, rng: &mut R) -> Vec<f64> {
    let v = Tensor::randn([c], std, rng).into_data();
    let mean = v.iter().sum::<f64>() / c as f64;
    v.into_iter().map(|x| x - mean).collect()
}

/// Per-channel standardisation over all positions of `[.. x C]` data.
fn standardise(data: &mut [f64], c: usize) {
    let n = (data.len() / c) as f64;
    for ch in 0..c {
        let mean = data.iter().skip(ch).step_by(c).sum::<f64>() / n;
        let var = data.iter().skip(ch).step_by(c).map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / var.sqrt();
        for x in data.iter_mut().skip(ch).step_by(c) {
            *x = (*x - mean) * inv;
        }
    }
}

pub fn gen_data(cfg: &Config) -> Result<SyntheticPairSet> {
    cfg.validate()?;
    let (t, g, c, k) = (cfg.frames, cfg.base_grid, cfg.channels, cfg.patch);
    if k > g {
        return Err(Error::Config(format!("patch {k} exceeds grid {g}")));
    }
    let mut rng = stream(cfg.seed, DATA_STREAM);
    let codes = sign_codes(cfg.patterns, c, &mut rng);
    let prototypes = (0..cfg.patterns)
        .map(|_| Embedding::new(Tensor::new([c], centred_gaussian(c, 1.0, &mut rng))?))
        .collect::<Result<Vec<_>>>()?;

    let n = cfg.train_pairs + cfg.test_pairs;
    let frames: Vec<usize> = (0..t).collect();
    let (mut videos, mut texts, mut labels) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let m = i % cfg.patterns;
        let mut v = Tensor::randn([t, g, g, c], 1.0, &mut rng).into_data();
        for &f in frames.choose_multiple(&mut rng, cfg.signal_frames) {
            let (r0, c0) = (rng.random_range(0..=g - k), rng.random_range(0..=g - k));
            for dr in 0..k {
                let sign = if dr < k / 2 { cfg.amplitude } else { -cfg.amplitude };
                for dc in 0..k {
                    let base = ((f * g + r0 + dr) * g + c0 + dc) * c;
                    for (x, s) in v[base..base + c].iter_mut().zip(&codes[m]) {
                        *x += sign * s;
                    }
                }
            }
        }
        standardise(&mut v, c);
        videos.push(Tensor::new([t, g, g, c], v)?);

        let noise = centred_gaussian(c, cfg.text_noise, &mut rng);
        let proto = prototypes[m].vector().data();
        texts.push(Embedding::new(Tensor::new([c], proto.iter().zip(noise).map(|(p, e)| p + e).collect())?)?);
        labels.push(m);
    }
    Ok(SyntheticPairSet {
        videos,
        texts,
        labels,
        codes,
        prototypes,
        train: 0..cfg.train_pairs,
        test: cfg.train_pairs..n,
        spec: SignalSpec {
            patterns: cfg.patterns,
            patch: k,
            amplitude: cfg.amplitude,
            signal_frames: cfg.signal_frames,
            text_noise: cfg.text_noise,
        },
    })
}

impl SyntheticPairSet {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// `videos.bin` (`[N x T x G x G x C]`), `texts.bin` (`[N x C]`) and `meta.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut shape = vec![self.videos.len()];
        shape.extend_from_slice(self.videos[0].shape());
        let all = Tensor::new(shape, self.videos.iter().flat_map(|v| v.data().iter().copied()).collect())?;
        all.save(dir.join("videos.bin"))?;
        stack(&self.texts)?.save(dir.join("texts.bin"))?;
        let meta = Meta {
            labels: self.labels.clone(),
            train: self.train.clone(),
            test: self.test.clone(),
            spec: self.spec.clone(),
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Per-channel mean over all positions of every video, `[N x C]`.
    pub fn global_means(&self) -> Tensor {
        let c = self.videos[0].last_dim();
        let data = self
            .videos
            .iter()
            .flat_map(|v| {
                let n = (v.len() / c) as f64;
                (0..c).map(move |ch| v.data().iter().skip(ch).step_by(c).sum::<f64>() / n)
            })
            .collect();
        Tensor::new([self.videos.len(), c], data).expect("non-empty")
    }

    /// Per-frame spatial channel means, flattened to `[N x T·C]`.
    pub fn frame_means(&self) -> Tensor {
        let shape = self.videos[0].shape();
        let (t, hw, c) = (shape[0], shape[1] * shape[2], shape[3]);
        let mut data = Vec::with_capacity(self.videos.len() * t * c);
        for v in &self.videos {
            for f in 0..t {
                let frame = &v.data()[f * hw * c..(f + 1) * hw * c];
                data.extend((0..c).map(|ch| frame.iter().skip(ch).step_by(c).sum::<f64>() / hw as f64));
            }
        }
        Tensor::new([self.videos.len(), t * c], data).expect("non-empty")
    }
}

/// Softmax regression from `features[N x F]` to pattern labels, fitted by
/// full-batch gradient descent on the training split. Returns test accuracy
/// in percent.
pub fn linear_probe(features: &Tensor, set: &SyntheticPairSet, iters: usize, lr: f64) -> Result<f64> {
    let f = features.last_dim();
    let m = set.spec.patterns;
    let rows = |r: &Range<usize>| {
        Tensor::new([r.len(), f], r.clone().flat_map(|i| features.row(i).to_vec()).collect())
    };
    let (xtr, xte) = (rows(&set.train)?, rows(&set.test)?);
    let ytr = &set.labels[set.train.clone()];
    let mut w = Tensor::zeros([f, m]);
    let mut b = Tensor::zeros([m]);
    for _ in 0..iters {
        let mut tape = Tape::new();
        let (wv, bv) = (tape.leaf(w.clone()), tape.leaf(b.clone()));
        let x = tape.constant(xtr.clone());
        let z = tape.matmul(x, wv)?;
        let z = tape.add(z, bv)?;
        let loss = tape.cross_entropy_rows(z, ytr)?;
        let g = tape.backward(loss)?;
        w = w.zip_with(g.get(wv).expect("leaf"), |p, d| p - lr * d);
        b = b.zip_with(g.get(bv).expect("leaf"), |p, d| p - lr * d);
    }
    let mut correct = 0;
    for (r, i) in set.test.clone().enumerate() {
        let scores: Vec<f64> = (0..m)
            .map(|j| b.data()[j] + xte.row(r).iter().enumerate().map(|(q, x)| x * w.data()[q * m + j]).sum::<f64>())
            .collect();
        let pred = (0..m).fold(0, |best, j| if scores[j] > scores[best] { j } else { best });
        correct += usize::from(pred == set.labels[i]);
    }
    Ok(100.0 * correct as f64 / set.test.len() as f64)
}
