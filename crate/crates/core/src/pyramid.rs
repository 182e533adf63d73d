//! Multi-scale token grids built from a single base grid of frame tokens.
//!
//! For every scale `s` the base grid `[T x G x G x C]` is resized to
//! `s x s` (adaptive max-pool when `s < G`, untouched when `s == G`,
//! nearest-neighbour upsampling when `G < s <= 2G`) and then passed through
//! a per-scale stack of `conv3x3 -> layer norm -> SiLU` blocks that keep
//! both the spatial size and the channel count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{PoolKind, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Strictly increasing list of output scales plus the base grid side length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSet {
    scales: Vec<usize>,
    base_grid: usize,
}

impl Default for ScaleSet {
    fn default() -> Self {
        Self {
            scales: vec![1, 3, 7, 14],
            base_grid: 14,
        }
    }
}

impl ScaleSet {
    pub fn new(scales: Vec<usize>, base_grid: usize) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Config("scale list is empty".into()));
        }
        if base_grid == 0 {
            return Err(Error::Config("base grid must be positive".into()));
        }
        if scales[0] == 0 || scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "scales must be positive and strictly increasing, got {scales:?}"
            )));
        }
        if let Some(&s) = scales.iter().find(|&&s| s > 2 * base_grid) {
            return Err(Error::Config(format!(
                "scale {s} exceeds twice the base grid {base_grid}"
            )));
        }
        Ok(Self { scales, base_grid })
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn base_grid(&self) -> usize {
        self.base_grid
    }

    /// Tokens one frame contributes across all scales: `sum s^2`.
    pub fn tokens_per_frame(&self) -> usize {
        self.scales.iter().map(|s| s * s).sum()
    }
}

/// One scale's token grids, `maps[i]` has shape `[T x s_i x s_i x C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFeatures {
    pub scales: Vec<usize>,
    pub maps: Vec<Tensor>,
}

impl PyramidFeatures {
    pub fn new(scales: Vec<usize>, maps: Vec<Tensor>) -> Result<Self> {
        if scales.is_empty() || scales.len() != maps.len() {
            return Err(Error::Contract(format!(
                "{} scales for {} maps",
                scales.len(),
                maps.len()
            )));
        }
        let (t, c) = (maps[0].shape()[0], maps[0].last_dim());
        for (s, m) in scales.iter().zip(&maps) {
            if m.shape() != [t, *s, *s, c] {
                return Err(Error::Contract(format!(
                    "scale {s} map has shape {:?}, expected {:?}",
                    m.shape(),
                    [t, *s, *s, c]
                )));
            }
        }
        Ok(Self { scales, maps })
    }

    pub fn frames(&self) -> usize {
        self.maps[0].shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.maps[0].last_dim()
    }

    pub fn bit_eq(&self, other: &PyramidFeatures) -> bool {
        self.scales == other.scales && self.maps.iter().zip(&other.maps).all(|(a, b)| a.bit_eq(b))
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct ScaleStack {
    scale: usize,
    blocks: Vec<ConvBlock>,
}

/// Initialisation knobs for [`PyramidParams::init`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PyramidInit {
    pub channels: usize,
    pub conv_layers: usize,
    /// Initial scale of the last layer norm in every stack. Zero makes every
    /// scale emit the constant `SiLU(out_beta)` field until training moves it.
    pub out_gamma: f64,
    pub out_beta: f64,
}

/// Per-scale conv stacks.
#[derive(Debug, Clone)]
pub struct PyramidParams {
    scales: ScaleSet,
    channels: usize,
    stacks: Vec<ScaleStack>,
}

impl PyramidParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        scales: &ScaleSet,
        init: PyramidInit,
        rng: &mut R,
    ) -> Result<Self> {
        let c = init.channels;
        if c == 0 {
            return Err(Error::Config("channel count must be positive".into()));
        }
        let std = 1.0 / ((9 * c) as f64).sqrt();
        let stacks = scales
            .scales()
            .iter()
            .map(|&s| {
                let blocks = (0..init.conv_layers)
                    .map(|li| {
                        let last = li + 1 == init.conv_layers;
                        let (g0, b0) = if last { (init.out_gamma, init.out_beta) } else { (1.0, 0.0) };
                        ConvBlock {
                            weight: store.add(format!("pyramid.s{s}.conv{li}.weight"), Tensor::randn([3, 3, c, c], std, rng)),
                            gamma: store.add(format!("pyramid.s{s}.norm{li}.gamma"), Tensor::full([c], g0)),
                            beta: store.add(format!("pyramid.s{s}.norm{li}.beta"), Tensor::full([c], b0)),
                        }
                    })
                    .collect();
                ScaleStack { scale: s, blocks }
            })
            .collect();
        Ok(Self {
            scales: scales.clone(),
            channels: c,
            stacks,
        })
    }

    pub fn scales(&self) -> &ScaleSet {
        &self.scales
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let g = self.scales.base_grid();
        match shape {
            &[t, h, w, c] if t >= 1 && h == g && w == g && c == self.channels => Ok(()),
            s => Err(Error::Config(format!(
                "pyramid expects [T x {g} x {g} x {}], got {s:?}",
                self.channels
            ))),
        }
    }

    /// Pooling / resizing stage only (no learned layers).
    pub fn resize(&self, tape: &mut Tape, f: Var, scale: usize) -> Result<Var> {
        let g = self.scales.base_grid();
        if scale < g {
            tape.pool2d(f, PoolKind::Max, (scale, scale))
        } else if scale == g {
            Ok(f)
        } else {
            tape.upsample_nearest(f, (scale, scale))
        }
    }

    /// Per-scale outputs `[T x s x s x C]`, in scale order.
    pub fn forward(&self, tape: &mut Tape, binds: &Bindings, f: Var) -> Result<Vec<Var>> {
        self.check_input(tape.shape(f))?;
        let mut out = Vec::with_capacity(self.stacks.len());
        for stack in &self.stacks {
            let mut x = self.resize(tape, f, stack.scale)?;
            for b in &stack.blocks {
                x = tape.conv2d(x, binds[b.weight], 1, 1)?;
                x = tape.layer_norm(x, binds[b.gamma], binds[b.beta], NORM_EPS)?;
                x = tape.silu(x);
            }
            out.push(x);
        }
        Ok(out)
    }
}

/// Evaluate the pyramid on a plain tensor.
pub fn generate_pyramid(f: &Tensor, params: &PyramidParams, store: &ParamStore) -> Result<PyramidFeatures> {
    let mut tape = Tape::inference();
    let binds = store.bind(&mut tape);
    let input = tape.constant(f.clone());
    let outs = params.forward(&mut tape, &binds, input)?;
    let maps = outs.iter().map(|&v| tape.value(v).clone()).collect();
    PyramidFeatures::new(params.scales.scales().to_vec(), maps)
}
