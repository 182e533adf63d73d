//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys and malformed
//! values are errors. Lists are comma separated.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregate::AggregationMode;
use crate::error::{Error, Result};
use crate::pyramid::ScaleSet;
use crate::retrieval::{Pooling, TAU_MAX, TAU_MIN};
use crate::ssm::{BlockKind, ScanVariant, SsmConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,

    pub frames: usize,
    pub base_grid: usize,
    pub channels: usize,
    pub scales: Vec<usize>,
    pub conv_layers: usize,

    pub aggregation: AggregationMode,
    pub block: BlockKind,
    pub variant: ScanVariant,
    pub layers: usize,
    pub residual: bool,
    pub expand: usize,
    pub d_state: usize,
    pub conv_kernel: usize,

    pub pooling: Pooling,
    pub temperature_init: f64,
    pub symmetric_loss: bool,

    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Learning-rate multiplier for the pyramid and residual stack; the
    /// temperature trains at the base rate.
    pub stack_lr_mult: f64,
    /// Global gradient-norm bound per step; zero disables clipping.
    pub grad_clip: f64,
    pub momentum: f64,

    pub patterns: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub patch: usize,
    pub amplitude: f64,
    pub signal_frames: usize,
    pub text_noise: f64,

    pub bench_frames: Vec<usize>,
    pub bench_channels: usize,
    pub bench_expand: usize,
    pub bench_d_state: usize,
    pub bench_budget: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 2,
            base_grid: 14,
            channels: 8,
            scales: vec![1, 3, 7, 14],
            conv_layers: 2,
            aggregation: AggregationMode::ScaleWise,
            block: BlockKind::Mamba,
            variant: ScanVariant::V2,
            layers: 4,
            residual: true,
            expand: 1,
            d_state: 4,
            conv_kernel: 4,
            pooling: Pooling::MeanAll,
            temperature_init: 0.07,
            symmetric_loss: true,
            batch_size: 16,
            steps: 1000,
            lr: 0.008,
            stack_lr_mult: 10.0,
            grad_clip: 0.5,
            momentum: 0.9,
            patterns: 32,
            train_pairs: 512,
            test_pairs: 100,
            patch: 4,
            amplitude: 5.0,
            signal_frames: 2,
            text_noise: 0.1,
            bench_frames: vec![4, 8, 12, 16, 20],
            bench_channels: 64,
            bench_expand: 2,
            bench_d_state: 16,
            bench_budget: 50_000_000,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for key {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "base_grid" => self.base_grid = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "scales" => self.scales = parse_list(key, v)?,
            "conv_layers" => self.conv_layers = parse(key, v)?,
            "aggregation" => self.aggregation = v.parse()?,
            "block" => self.block = v.parse()?,
            "variant" => self.variant = v.parse()?,
            "layers" => self.layers = parse(key, v)?,
            "residual" => self.residual = parse(key, v)?,
            "expand" => self.expand = parse(key, v)?,
            "d_state" => self.d_state = parse(key, v)?,
            "conv_kernel" => self.conv_kernel = parse(key, v)?,
            "pooling" => self.pooling = v.parse()?,
            "temperature_init" => self.temperature_init = parse(key, v)?,
            "symmetric_loss" => self.symmetric_loss = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "stack_lr_mult" => self.stack_lr_mult = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "patterns" => self.patterns = parse(key, v)?,
            "train_pairs" => self.train_pairs = parse(key, v)?,
            "test_pairs" => self.test_pairs = parse(key, v)?,
            "patch" => self.patch = parse(key, v)?,
            "amplitude" => self.amplitude = parse(key, v)?,
            "signal_frames" => self.signal_frames = parse(key, v)?,
            "text_noise" => self.text_noise = parse(key, v)?,
            "bench_frames" => self.bench_frames = parse_list(key, v)?,
            "bench_channels" => self.bench_channels = parse(key, v)?,
            "bench_expand" => self.bench_expand = parse(key, v)?,
            "bench_d_state" => self.bench_d_state = parse(key, v)?,
            "bench_budget" => self.bench_budget = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn scale_set(&self) -> Result<ScaleSet> {
        ScaleSet::new(self.scales.clone(), self.base_grid)
    }

    pub fn ssm(&self) -> SsmConfig {
        SsmConfig {
            channels: self.channels,
            expand: self.expand,
            d_state: self.d_state,
            conv_kernel: self.conv_kernel,
            variant: self.variant,
            block: self.block,
            residual: self.residual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        self.scale_set()?;
        if self.layers > 0 {
            self.ssm().validate()?;
        }
        if self.frames == 0 || self.channels == 0 || self.conv_layers == 0 {
            return err("frames, channels and conv_layers must be positive".into());
        }
        if self.patch < 2 || self.patch % 2 != 0 || self.patch > self.base_grid {
            return err(format!("patch {} must be even, at least 2 and at most base_grid {}", self.patch, self.base_grid));
        }
        if self.signal_frames == 0 || self.signal_frames > self.frames {
            return err(format!("signal_frames {} must lie in 1..={}", self.signal_frames, self.frames));
        }
        if self.patterns == 0 || (self.channels < 64 && self.patterns > 1usize << (self.channels - 1)) {
            return err(format!(
                "{} patterns need distinct non-opposite sign vectors over {} channels",
                self.patterns, self.channels
            ));
        }
        if self.channels < 2 {
            return err("channels must be at least 2 for centred text embeddings".into());
        }
        if self.batch_size < 2 || self.batch_size > self.train_pairs {
            return err(format!("batch_size {} must lie in 2..={}", self.batch_size, self.train_pairs));
        }
        if self.test_pairs == 0 {
            return err("test_pairs must be positive".into());
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.temperature_init) {
            return err(format!("temperature_init {} outside [{TAU_MIN}, {TAU_MAX}]", self.temperature_init));
        }
        if !(self.stack_lr_mult >= 0.0) || !(self.grad_clip >= 0.0) {
            return err(format!(
                "stack_lr_mult {} and grad_clip {} must be >= 0",
                self.stack_lr_mult, self.grad_clip
            ));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return err(format!("lr {} must be >= 0 and momentum {} in [0, 1)", self.lr, self.momentum));
        }
        if !(self.amplitude >= 0.0) || !(self.text_noise >= 0.0) {
            return err("amplitude and text_noise must be non-negative".into());
        }
        if self.bench_frames.windows(2).any(|w| w[0] >= w[1]) || self.bench_frames.contains(&0) {
            return err("bench_frames must be positive and strictly increasing".into());
        }
        Ok(())
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "frames = {}", self.frames)?;
        writeln!(f, "base_grid = {}", self.base_grid)?;
        writeln!(f, "channels = {}", self.channels)?;
        writeln!(f, "scales = {}", join(&self.scales))?;
        writeln!(f, "conv_layers = {}", self.conv_layers)?;
        writeln!(f, "aggregation = {}", self.aggregation)?;
        writeln!(f, "block = {}", self.block)?;
        writeln!(f, "variant = {}", self.variant)?;
        writeln!(f, "layers = {}", self.layers)?;
        writeln!(f, "residual = {}", self.residual)?;
        writeln!(f, "expand = {}", self.expand)?;
        writeln!(f, "d_state = {}", self.d_state)?;
        writeln!(f, "conv_kernel = {}", self.conv_kernel)?;
        writeln!(f, "pooling = {}", self.pooling)?;
        writeln!(f, "temperature_init = {:?}", self.temperature_init)?;
        writeln!(f, "symmetric_loss = {}", self.symmetric_loss)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "steps = {}", self.steps)?;
        writeln!(f, "lr = {:?}", self.lr)?;
        writeln!(f, "stack_lr_mult = {:?}", self.stack_lr_mult)?;
        writeln!(f, "grad_clip = {:?}", self.grad_clip)?;
        writeln!(f, "momentum = {:?}", self.momentum)?;
        writeln!(f, "patterns = {}", self.patterns)?;
        writeln!(f, "train_pairs = {}", self.train_pairs)?;
        writeln!(f, "test_pairs = {}", self.test_pairs)?;
        writeln!(f, "patch = {}", self.patch)?;
        writeln!(f, "amplitude = {:?}", self.amplitude)?;
        writeln!(f, "signal_frames = {}", self.signal_frames)?;
        writeln!(f, "text_noise = {:?}", self.text_noise)?;
        writeln!(f, "bench_frames = {}", join(&self.bench_frames))?;
        writeln!(f, "bench_channels = {}", self.bench_channels)?;
        writeln!(f, "bench_expand = {}", self.bench_expand)?;
        writeln!(f, "bench_d_state = {}", self.bench_d_state)?;
        writeln!(f, "bench_budget = {}", self.bench_budget)
    }
}
