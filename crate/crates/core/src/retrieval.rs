//! Video embeddings, cosine similarity and the InfoNCE objective.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregate::Layout;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore, Sgd};
use crate::tensor::Tensor;

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pooling {
    /// Mean over every token of the sequence.
    MeanAll,
    /// Mean over scale-1 tokens only.
    MeanScale1,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_all" => Ok(Self::MeanAll),
            "mean_scale1" => Ok(Self::MeanScale1),
            _ => Err(Error::Config(format!("unknown pooling {s:?} (mean_all|mean_scale1)"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MeanAll => "mean_all",
            Self::MeanScale1 => "mean_scale1",
        })
    }
}

/// Unit-norm vector.
#[derive(Debug, Clone)]
pub struct Embedding {
    vector: Tensor,
}

impl Embedding {
    /// Normalise `v` to unit length; a zero vector is a domain error.
    pub fn new(v: Tensor) -> Result<Self> {
        let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Domain {
                op: "embedding",
                detail: format!("cannot normalise a vector of norm {norm}"),
            });
        }
        let c = v.len();
        Ok(Self {
            vector: Tensor::new([c], v.into_data().into_iter().map(|x| x / norm).collect())?,
        })
    }

    pub fn vector(&self) -> &Tensor {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Stack embeddings into a `[B x C]` matrix.
pub fn stack(embeddings: &[Embedding]) -> Result<Tensor> {
    let c = embeddings.first().map(Embedding::dim).ok_or_else(|| Error::Contract("no embeddings".into()))?;
    if embeddings.iter().any(|e| e.dim() != c) {
        return Err(Error::Contract("embeddings of different widths".into()));
    }
    Tensor::new(
        [embeddings.len(), c],
        embeddings.iter().flat_map(|e| e.vector.data().iter().copied()).collect(),
    )
}

/// Select and average the tokens of `v_o[L x C]` that `pooling` keeps, then
/// L2-normalise. Returns a `[1 x C]` row.
pub fn pool_on_tape(tape: &mut Tape, v_o: Var, layout: &Layout, pooling: Pooling) -> Result<Var> {
    let rows = tape.shape(v_o)[0];
    if rows != layout.len() {
        return Err(Error::Contract(format!("{rows} tokens for a layout of {}", layout.len())));
    }
    let c = tape.shape(v_o)[1];
    let selected = match pooling {
        Pooling::MeanAll => v_o,
        Pooling::MeanScale1 => {
            let idx = layout.positions_of_scale(1);
            if idx.is_empty() {
                return Err(Error::Config("mean_scale1 pooling needs scale 1 in the scale set".into()));
            }
            tape.gather_rows(v_o, idx)?
        }
    };
    let mean = tape.mean_rows(selected);
    let row = tape.reshape(mean, [1, c])?;
    tape.normalize_rows(row)
}

pub fn pool_video(v_o: &Tensor, layout: &Layout, pooling: Pooling) -> Result<Embedding> {
    let mut tape = Tape::inference();
    let v = tape.constant(v_o.clone());
    let e = pool_on_tape(&mut tape, v, layout, pooling)?;
    Embedding::new(tape.value(e).reshape([v_o.last_dim()])?)
}

/// Cosine similarities between `B_v` videos and `B_t` texts with the index of
/// the matching text for every video.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    values: Tensor,
    truth: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn new(values: Tensor, truth: Vec<usize>) -> Result<Self> {
        let &[bv, bt] = values.shape() else {
            return Err(Error::Contract(format!("similarity matrix of shape {:?}", values.shape())));
        };
        if truth.len() != bv || truth.iter().any(|&t| t >= bt) {
            return Err(Error::Contract(format!(
                "{} ground-truth indices for a {bv}x{bt} matrix",
                truth.len()
            )));
        }
        Ok(Self { values, truth })
    }

    /// Paired batch: video `i` matches text `i`.
    pub fn diagonal(values: Tensor) -> Result<Self> {
        let n = values.shape()[0];
        Self::new(values, (0..n).collect())
    }

    pub fn from_embeddings(videos: &[Embedding], texts: &[Embedding]) -> Result<Self> {
        if videos.len() != texts.len() {
            return Err(Error::Contract(format!("{} videos for {} texts", videos.len(), texts.len())));
        }
        let (v, t) = (stack(videos)?, stack(texts)?);
        let (bv, bt, c) = (v.rows(), t.rows(), v.last_dim());
        if t.last_dim() != c {
            return Err(Error::Contract(format!("video width {c} vs text width {}", t.last_dim())));
        }
        let mut values = Vec::with_capacity(bv * bt);
        for i in 0..bv {
            for j in 0..bt {
                let dot: f64 = v.row(i).iter().zip(t.row(j)).map(|(a, b)| a * b).sum();
                values.push(dot.clamp(-1.0, 1.0));
            }
        }
        Self::diagonal(Tensor::new([bv, bt], values)?)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }

    pub fn videos(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn texts(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn transposed(&self) -> Result<Self> {
        let inv = inverse_permutation(&self.truth, self.texts())?;
        let (bv, bt) = (self.videos(), self.texts());
        let values = Tensor::from_fn([bt, bv], |i| self.values.data()[(i % bv) * bt + i / bv]);
        Self::new(values, inv)
    }
}

fn inverse_permutation(truth: &[usize], n: usize) -> Result<Vec<usize>> {
    let mut inv = vec![usize::MAX; n];
    for (i, &t) in truth.iter().enumerate() {
        if inv[t] != usize::MAX {
            return Err(Error::Contract("ground truth is not a permutation".into()));
        }
        inv[t] = i;
    }
    if truth.len() != n {
        return Err(Error::Contract("ground truth is not a permutation".into()));
    }
    Ok(inv)
}

/// InfoNCE over `sim[B_v x B_t]` scaled by `inv_tau` (a one-element var).
///
/// Rows are video queries with targets `truth`. The symmetric form averages
/// the row loss with the loss over columns (text queries).
pub fn info_nce_on_tape(tape: &mut Tape, sim: Var, truth: &[usize], inv_tau: Var, symmetric: bool) -> Result<Var> {
    let logits = tape.mul(sim, inv_tau)?;
    let rows = tape.cross_entropy_rows(logits, truth)?;
    if !symmetric {
        return Ok(rows);
    }
    let &[bv, bt] = tape.shape(sim) else { unreachable!("checked by cross_entropy_rows") };
    if bv != bt {
        return Err(Error::Contract(format!("symmetric loss needs a square matrix, got {bv}x{bt}")));
    }
    let inv = inverse_permutation(truth, bt)?;
    let lt = tape.transpose(logits)?;
    let cols = tape.cross_entropy_rows(lt, &inv)?;
    let both = tape.add(rows, cols)?;
    Ok(tape.scale(both, 0.5))
}

pub fn info_nce(sim: &SimilarityMatrix, tau: f64, symmetric: bool) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Domain {
            op: "info_nce",
            detail: format!("temperature must be positive, got {tau}"),
        });
    }
    let mut tape = Tape::inference();
    let s = tape.constant(sim.values.clone());
    let inv = tape.constant(Tensor::scalar(1.0 / tau));
    let l = info_nce_on_tape(&mut tape, s, &sim.truth, inv, symmetric)?;
    Ok(tape.value(l).data()[0])
}

/// Learnable temperature stored as `log τ`, kept inside `[TAU_MIN, TAU_MAX]`.
#[derive(Debug, Clone, Copy)]
pub struct Temperature {
    pub log_tau: ParamId,
}

impl Temperature {
    pub fn init(store: &mut ParamStore, tau: f64) -> Result<Self> {
        if !(TAU_MIN..=TAU_MAX).contains(&tau) {
            return Err(Error::Config(format!(
                "temperature_init {tau} outside [{TAU_MIN}, {TAU_MAX}]"
            )));
        }
        Ok(Self {
            log_tau: store.add("head.log_tau", Tensor::scalar(tau.ln())),
        })
    }

    pub fn value(&self, store: &ParamStore) -> f64 {
        store.get(self.log_tau).data()[0].exp()
    }

    pub fn inv_on_tape(&self, tape: &mut Tape, binds: &Bindings) -> Var {
        let neg = tape.scale(binds[self.log_tau], -1.0);
        tape.exp(neg)
    }

    pub fn clamp(&self, store: &mut ParamStore) {
        Sgd::clamp(store, self.log_tau, TAU_MIN.ln(), TAU_MAX.ln());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::AggregationMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sim(rows: &[&[f64]]) -> SimilarityMatrix {
        let n = rows.len();
        let m = rows[0].len();
        SimilarityMatrix::diagonal(Tensor::new([n, m], rows.concat()).unwrap()).unwrap()
    }

    #[test]
    fn two_by_two_hand_case() {
        let s = sim(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let want = -0.5
            * ((0.9f64.exp() / (0.9f64.exp() + 0.1f64.exp())).ln() + (0.8f64.exp() / (0.2f64.exp() + 0.8f64.exp())).ln());
        let got = info_nce(&s, 1.0, false).unwrap();
        assert!((got - want).abs() < 1e-14);
        assert!((got - 0.4043).abs() < 5e-5);
    }

    #[test]
    fn uniform_similarity_gives_ln_b() {
        for symmetric in [false, true] {
            let s = SimilarityMatrix::diagonal(Tensor::full([8, 8], 0.3)).unwrap();
            let got = info_nce(&s, 0.07, symmetric).unwrap();
            assert!((got - 8f64.ln()).abs() < 1e-12);
            assert!((got - 2.0794).abs() < 5e-5);
        }
    }

    #[test]
    fn saturated_limit_goes_to_zero() {
        let s = SimilarityMatrix::diagonal(Tensor::from_fn([4, 4], |i| if i % 5 == 0 { 1.0 } else { -1.0 })).unwrap();
        let mut last = f64::INFINITY;
        for tau in [1.0, 0.1, 0.01, 0.001] {
            let l = info_nce(&s, tau, true).unwrap();
            assert!(l <= last && l >= 0.0);
            last = l;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn nonpositive_tau_is_domain_error() {
        let s = sim(&[&[0.9, 0.1], &[0.2, 0.8]]);
        assert!(matches!(info_nce(&s, 0.0, false), Err(Error::Domain { .. })));
        assert!(matches!(info_nce(&s, -1.0, true), Err(Error::Domain { .. })));
    }

    #[test]
    fn symmetric_is_mean_of_both_directions() {
        let s = sim(&[&[0.9, 0.1, 0.3], &[0.2, 0.8, -0.4], &[0.5, 0.0, 0.6]]);
        let rows = info_nce(&s, 0.5, false).unwrap();
        let cols = info_nce(&s.transposed().unwrap(), 0.5, false).unwrap();
        assert!((info_nce(&s, 0.5, true).unwrap() - 0.5 * (rows + cols)).abs() < 1e-15);
    }

    #[test]
    fn constant_tokens_pool_to_their_direction() {
        let layout = Layout::new(AggregationMode::ScaleWise, &[1, 3], 2);
        let u = [3.0, -4.0, 0.0];
        let v = Tensor::from_fn([layout.len(), 3], |i| u[i % 3]);
        for p in [Pooling::MeanAll, Pooling::MeanScale1] {
            let e = pool_video(&v, &layout, p).unwrap();
            let want = [0.6, -0.8, 0.0];
            for (a, b) in e.vector().data().iter().zip(want) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mean_scale1_counts_one_token_per_frame() {
        let layout = Layout::new(AggregationMode::FrameWise, &[1, 3, 7, 14], 12);
        assert_eq!(layout.positions_of_scale(1).len(), 12);
        let no_one = Layout::new(AggregationMode::ScaleWise, &[3, 7], 2);
        let v = Tensor::full([no_one.len(), 2], 1.0);
        assert!(matches!(pool_video(&v, &no_one, Pooling::MeanScale1), Err(Error::Config(_))));
    }

    #[test]
    fn mean_all_matches_direct_column_mean() {
        let layout = Layout::new(AggregationMode::ScaleWise, &[1, 3], 2);
        let v = Tensor::randn([20, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let mut mean = [0.0; 5];
        for r in 0..20 {
            for (m, x) in mean.iter_mut().zip(v.row(r)) {
                *m += x / 20.0;
            }
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        let e = pool_video(&v, &layout, Pooling::MeanAll).unwrap();
        for (a, m) in e.vector().data().iter().zip(mean) {
            assert!((a - m / norm).abs() < 1e-12);
        }
        assert!((e.vector().data().iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn similarities_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = |rng: &mut ChaCha8Rng| Embedding::new(Tensor::randn([6], 1.0, rng)).unwrap();
        let v: Vec<_> = (0..5).map(|_| e(&mut rng)).collect();
        let t: Vec<_> = (0..5).map(|_| e(&mut rng)).collect();
        let s = SimilarityMatrix::from_embeddings(&v, &t).unwrap();
        assert!(s.values().data().iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn temperature_clamps_into_range() {
        let mut store = ParamStore::new();
        let t = Temperature::init(&mut store, 0.07).unwrap();
        assert!((t.value(&store) - 0.07).abs() < 1e-15);
        store.set(t.log_tau, Tensor::scalar(5.0)).unwrap();
        t.clamp(&mut store);
        assert!((t.value(&store) - 1.0).abs() < 1e-15);
        store.set(t.log_tau, Tensor::scalar(-50.0)).unwrap();
        t.clamp(&mut store);
        assert!((t.value(&store) - 1e-3).abs() < 1e-15);
        assert!(Temperature::init(&mut store, 0.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_sim(seed: u64, n: usize) -> SimilarityMatrix {
            let v = Tensor::randn([n, n], 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).map(|x| x.clamp(-1.0, 1.0));
            SimilarityMatrix::diagonal(v).unwrap()
        }

        proptest! {
            #[test]
            fn nonnegative(seed in any::<u64>(), n in 1usize..8, tau in 0.01f64..1.0, sym in any::<bool>()) {
                prop_assert!(info_nce(&random_sim(seed, n), tau, sym).unwrap() >= 0.0);
            }

            #[test]
            fn row_shift_invariant(seed in any::<u64>(), n in 2usize..8, row in 0usize..8, shift in -2.0f64..2.0) {
                let s = random_sim(seed, n);
                let row = row % n;
                let shifted = Tensor::from_fn([n, n], |i| s.values().data()[i] + if i / n == row { shift } else { 0.0 });
                let s2 = SimilarityMatrix::diagonal(shifted).unwrap();
                let (a, b) = (info_nce(&s, 0.2, false).unwrap(), info_nce(&s2, 0.2, false).unwrap());
                prop_assert!((a - b).abs() < 1e-10);
            }

            #[test]
            fn gradient_matches_finite_differences(seed in any::<u64>(), n in 2usize..6, sym in any::<bool>()) {
                let s = random_sim(seed, n);
                let f = |tape: &mut Tape, p: &[Var]| {
                    let inv = tape.constant(Tensor::scalar(1.0 / 0.3));
                    info_nce_on_tape(tape, p[0], &(0..n).collect::<Vec<_>>(), inv, sym)
                };
                let rep = crate::gradcheck::grad_check(f, &[s.values().clone()], 1e-5, 1e-6).unwrap();
                prop_assert!(rep.passed, "{:?}", rep);
            }
        }
    }
}
