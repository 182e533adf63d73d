//! Flattening a token pyramid into one sequence.
//!
//! Scales are always visited in ascending order and each grid is read in
//! row-major order. The three modes differ in where the frame loop sits:
//!
//! * scale-wise: scale, then frame, then position;
//! * frame-wise: frame, then scale, then position;
//! * spatial-wise: frames are mean-pooled away first, then scale, then position.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::pyramid::PyramidFeatures;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggregationMode {
    ScaleWise,
    FrameWise,
    SpatialWise,
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scale" => Ok(Self::ScaleWise),
            "frame" => Ok(Self::FrameWise),
            "spatial" => Ok(Self::SpatialWise),
            _ => Err(Error::Config(format!("unknown aggregation mode {s:?} (scale|frame|spatial)"))),
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ScaleWise => "scale",
            Self::FrameWise => "frame",
            Self::SpatialWise => "spatial",
        })
    }
}

/// Pyramid coordinate of one sequence position. `frame` is `-1` for
/// spatial-wise sequences, where the frame axis has been averaged out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenCoord {
    pub scale: usize,
    pub frame: i64,
    pub row: usize,
    pub col: usize,
}

/// Position table of an aggregated sequence.
///
/// `source[p]` is the row of the canonical scale-major concatenation that
/// lands at position `p`; `inverse` is its inverse permutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    mode: AggregationMode,
    scales: Vec<usize>,
    frames: usize,
    coords: Vec<TokenCoord>,
    source: Vec<usize>,
    inverse: Vec<usize>,
}

impl Layout {
    pub fn new(mode: AggregationMode, scales: &[usize], frames: usize) -> Self {
        let t = if mode == AggregationMode::SpatialWise { 1 } else { frames };
        let mut offsets = Vec::with_capacity(scales.len());
        let mut acc = 0;
        for &s in scales {
            offsets.push(acc);
            acc += t * s * s;
        }
        let mut coords = Vec::with_capacity(acc);
        let mut source = Vec::with_capacity(acc);
        let mut push = |si: usize, f: usize| {
            let s = scales[si];
            for row in 0..s {
                for col in 0..s {
                    let frame = if mode == AggregationMode::SpatialWise { -1 } else { f as i64 };
                    coords.push(TokenCoord { scale: s, frame, row, col });
                    source.push(offsets[si] + (f * s + row) * s + col);
                }
            }
        };
        match mode {
            AggregationMode::ScaleWise | AggregationMode::SpatialWise => {
                for si in 0..scales.len() {
                    for f in 0..t {
                        push(si, f);
                    }
                }
            }
            AggregationMode::FrameWise => {
                for f in 0..t {
                    for si in 0..scales.len() {
                        push(si, f);
                    }
                }
            }
        }
        let mut inverse = vec![0; source.len()];
        for (p, &s) in source.iter().enumerate() {
            inverse[s] = p;
        }
        Self {
            mode,
            scales: scales.to_vec(),
            frames,
            coords,
            source,
            inverse,
        }
    }

    pub fn mode(&self) -> AggregationMode {
        self.mode
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[TokenCoord] {
        &self.coords
    }

    pub fn source(&self) -> &[usize] {
        &self.source
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    /// Sequence positions holding tokens of `scale`.
    pub fn positions_of_scale(&self, scale: usize) -> Vec<usize> {
        self.coords
            .iter()
            .enumerate()
            .filter(|(_, c)| c.scale == scale)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Flattened tokens `[len x C]` and their layout.
#[derive(Debug, Clone)]
pub struct AggregatedSequence {
    pub tokens: Tensor,
    pub layout: Layout,
}

/// Aggregate per-scale maps recorded on a tape.
pub fn aggregate_on_tape(tape: &mut Tape, maps: &[Var], layout: &Layout) -> Result<Var> {
    if maps.len() != layout.scales.len() {
        return Err(Error::Contract(format!(
            "{} maps for {} scales",
            maps.len(),
            layout.scales.len()
        )));
    }
    let mut parts = Vec::with_capacity(maps.len());
    for (&m, &s) in maps.iter().zip(&layout.scales) {
        let shape = tape.shape(m).to_vec();
        let &[t, h, w, c] = shape.as_slice() else {
            return Err(Error::Contract(format!("scale map of shape {shape:?}")));
        };
        if h != s || w != s || t != layout.frames {
            return Err(Error::Contract(format!(
                "map {shape:?} does not match scale {s} with {} frames",
                layout.frames
            )));
        }
        let part = match layout.mode {
            AggregationMode::SpatialWise => {
                let per_frame = tape.reshape(m, [t, s * s * c])?;
                let pooled = tape.mean_rows(per_frame);
                tape.reshape(pooled, [s * s, c])?
            }
            _ => tape.reshape(m, [t * s * s, c])?,
        };
        parts.push(part);
    }
    let canonical = tape.concat_rows(&parts)?;
    match layout.mode {
        AggregationMode::FrameWise => tape.gather_rows(canonical, layout.source.clone()),
        _ => Ok(canonical),
    }
}

pub fn aggregate(p: &PyramidFeatures, mode: AggregationMode) -> Result<AggregatedSequence> {
    let layout = Layout::new(mode, &p.scales, p.frames());
    let mut tape = Tape::inference();
    let maps: Vec<Var> = p.maps.iter().map(|m| tape.constant(m.clone())).collect();
    let out = aggregate_on_tape(&mut tape, &maps, &layout)?;
    Ok(AggregatedSequence {
        tokens: tape.value(out).clone(),
        layout,
    })
}

/// Exact inverse of [`aggregate`] for the lossless modes.
pub fn disaggregate(seq: &AggregatedSequence) -> Result<PyramidFeatures> {
    let layout = &seq.layout;
    if layout.mode == AggregationMode::SpatialWise {
        return Err(Error::Contract(
            "spatial-wise sequences are mean-pooled over frames and cannot be disaggregated".into(),
        ));
    }
    let c = seq.tokens.last_dim();
    if seq.tokens.rows() != layout.len() {
        return Err(Error::Contract(format!(
            "{} tokens for a layout of {}",
            seq.tokens.rows(),
            layout.len()
        )));
    }
    let t = layout.frames;
    let mut maps = Vec::with_capacity(layout.scales.len());
    let mut canon = 0;
    for &s in &layout.scales {
        let n = t * s * s;
        let mut data = Vec::with_capacity(n * c);
        for i in canon..canon + n {
            data.extend_from_slice(seq.tokens.row(layout.inverse[i]));
        }
        maps.push(Tensor::new([t, s, s, c], data)?);
        canon += n;
    }
    PyramidFeatures::new(layout.scales.clone(), maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn coord(scale: usize, frame: i64, row: usize, col: usize) -> TokenCoord {
        TokenCoord { scale, frame, row, col }
    }

    fn random_pyramid(t: usize, scales: &[usize], c: usize, seed: u64) -> PyramidFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps = scales.iter().map(|&s| Tensor::randn([t, s, s, c], 1.0, &mut rng)).collect();
        PyramidFeatures::new(scales.to_vec(), maps).unwrap()
    }

    #[test]
    fn scale_wise_order() {
        let l = Layout::new(AggregationMode::ScaleWise, &[1, 3], 2);
        assert_eq!(l.len(), 20);
        assert_eq!(&l.coords()[..3], &[coord(1, 0, 0, 0), coord(1, 1, 0, 0), coord(3, 0, 0, 0)]);
        assert_eq!(l.coords()[11], coord(3, 1, 0, 0));
    }

    #[test]
    fn frame_wise_order() {
        let l = Layout::new(AggregationMode::FrameWise, &[1, 3], 2);
        assert_eq!(l.len(), 20);
        assert_eq!(l.coords()[0], coord(1, 0, 0, 0));
        assert_eq!(l.coords()[1], coord(3, 0, 0, 0));
        assert_eq!(l.coords()[9], coord(3, 0, 2, 2));
        assert_eq!(l.coords()[10], coord(1, 1, 0, 0));
    }

    #[test]
    fn spatial_wise_length_ignores_frames() {
        let l = Layout::new(AggregationMode::SpatialWise, &[1, 3, 7, 14], 12);
        assert_eq!(l.len(), 255);
        assert!(l.coords().iter().all(|c| c.frame == -1));
        let p = random_pyramid(12, &[1, 3, 7, 14], 2, 1);
        assert_eq!(aggregate(&p, AggregationMode::SpatialWise).unwrap().tokens.shape(), [255, 2]);
    }

    #[test]
    fn layout_is_bijection() {
        for mode in [AggregationMode::ScaleWise, AggregationMode::FrameWise, AggregationMode::SpatialWise] {
            let l = Layout::new(mode, &[1, 2, 5], 3);
            let mut seen = l.source().to_vec();
            seen.sort_unstable();
            assert_eq!(seen, (0..l.len()).collect::<Vec<_>>());
            let unique: std::collections::HashSet<_> = l.coords().iter().collect();
            assert_eq!(unique.len(), l.len());
        }
    }

    #[test]
    fn spatial_disaggregate_is_an_error() {
        let p = random_pyramid(2, &[1, 3], 2, 2);
        let seq = aggregate(&p, AggregationMode::SpatialWise).unwrap();
        assert!(matches!(disaggregate(&seq), Err(Error::Contract(_))));
    }

    #[test]
    fn single_frame_scale_and_frame_agree() {
        let p = random_pyramid(1, &[1, 3, 7], 3, 3);
        let a = aggregate(&p, AggregationMode::ScaleWise).unwrap();
        let b = aggregate(&p, AggregationMode::FrameWise).unwrap();
        assert!(a.tokens.bit_eq(&b.tokens));
    }

    #[test]
    fn spatial_equals_scale_wise_of_frame_mean() {
        let p = random_pyramid(4, &[1, 3, 7], 3, 4);
        let spatial = aggregate(&p, AggregationMode::SpatialWise).unwrap();
        let mut tape = Tape::inference();
        let pooled_maps = p
            .maps
            .iter()
            .zip(&p.scales)
            .map(|(m, &s)| {
                let v = tape.constant(m.clone());
                let r = tape.reshape(v, [4, s * s * 3]).unwrap();
                let mean = tape.mean_rows(r);
                tape.value(mean).reshape([1, s, s, 3]).unwrap()
            })
            .collect();
        let pooled = PyramidFeatures::new(p.scales.clone(), pooled_maps).unwrap();
        let scale = aggregate(&pooled, AggregationMode::ScaleWise).unwrap();
        assert!(spatial.tokens.bit_eq(&scale.tokens));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn lossless_modes_round_trip(t in 1usize..4, seed in any::<u64>(), frame_wise in any::<bool>()) {
                let p = random_pyramid(t, &[1, 2, 4], 3, seed);
                let mode = if frame_wise { AggregationMode::FrameWise } else { AggregationMode::ScaleWise };
                let seq = aggregate(&p, mode).unwrap();
                prop_assert_eq!(seq.tokens.rows(), t * 21);
                let sum_in: f64 = p.maps.iter().flat_map(|m| m.data()).sum();
                let mut sorted_in: Vec<f64> = p.maps.iter().flat_map(|m| m.data().iter().copied()).collect();
                let mut sorted_out = seq.tokens.data().to_vec();
                sorted_in.sort_by(f64::total_cmp);
                sorted_out.sort_by(f64::total_cmp);
                prop_assert_eq!(sorted_in, sorted_out);
                let _ = sum_in;
                prop_assert!(disaggregate(&seq).unwrap().bit_eq(&p));
            }
        }
    }
}
