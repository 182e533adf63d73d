//! Analytic cost models for one residual layer and instrumented sweeps
//! that check them against counted multiply-adds and peak live scalars.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::autograd::Tape;
use crate::config::Config;
use crate::data::{stream, INIT_STREAM};
use crate::error::{Error, Result};
use crate::instrument;
use crate::params::ParamStore;
use crate::ssm::{res_mamba_layer, BlockKind, ScanVariant, SsmConfig, SsmLayerParams};
use crate::tensor::Tensor;

/// Coefficients used by [`predict_cost`], emitted at the top of every CSV report.
pub const COST_HEADER: &str = "\
# cost model for one residual layer on L tokens (C channels, E = expand*C, N state, k conv taps, D = 2 if bidirectional else 1)
# madds, shared:   L*(3*C*E + C^2)            in_proj 2CE, out_proj EC, gate C^2
# madds, mamba:    + D*L*E*(k + E + 6*N)      conv k, dt E, B/C projections 2N, scan 4N
# madds, mambaout: + D*L*E*k                  conv only
# madds, attention:+ 3*L*E^2 + 2*L^2*E        q/k/v projections, scores, weighted sum
# peak, shared:    6*L*E + 5*L*C
# peak, mamba:     + D*(6*L*E + 2*L*N + 2*E*N) + 4*L*E if D = 2
# peak, mambaout:  + D*2*L*E + 4*L*E if D = 2
# peak, attention: + 6*L*E + 2*L^2            scores and softmax weights
# peak counts activation scalars held by an inference pass; parameters and input excluded
";

/// Predicted and (optionally) measured cost of one layer forward pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostModel {
    pub kind: BlockKind,
    pub variant: ScanVariant,
    pub tokens: usize,
    pub channels: usize,
    pub inner: usize,
    pub d_state: usize,
    pub conv_kernel: usize,
    pub predicted_madds: u64,
    pub predicted_peak: u64,
    pub measured_madds: Option<u64>,
    pub peak_scalars: Option<u64>,
}

impl CostModel {
    /// Multiply-adds proportional to `L^2`.
    pub fn quadratic_madds(&self) -> u64 {
        match self.kind {
            BlockKind::Attention => 2 * (self.tokens * self.tokens * self.inner) as u64,
            _ => 0,
        }
    }
}

fn directions(variant: ScanVariant) -> usize {
    if variant.bidirectional() {
        2
    } else {
        1
    }
}

pub fn predict_cost(cfg: SsmConfig, tokens: usize) -> Result<CostModel> {
    cfg.validate()?;
    if tokens == 0 {
        return Err(Error::Config("token count must be positive".into()));
    }
    let (l, c, e, n, k) = (tokens, cfg.channels, cfg.inner(), cfg.d_state, cfg.conv_kernel);
    let d = directions(cfg.variant);
    let extra_dir = if d == 2 { 4 * l * e } else { 0 };
    let (madds, peak) = match cfg.block {
        BlockKind::Mamba => (
            d * l * e * (k + e + 6 * n),
            d * (6 * l * e + 2 * l * n + 2 * e * n) + extra_dir,
        ),
        BlockKind::MambaOut => (d * l * e * k, d * 2 * l * e + extra_dir),
        BlockKind::Attention => (3 * l * e * e + 2 * l * l * e, 6 * l * e + 2 * l * l),
    };
    Ok(CostModel {
        kind: cfg.block,
        variant: cfg.variant,
        tokens,
        channels: c,
        inner: e,
        d_state: n,
        conv_kernel: k,
        predicted_madds: (l * (3 * c * e + c * c) + madds) as u64,
        predicted_peak: (6 * l * e + 5 * l * c + peak) as u64,
        measured_madds: None,
        peak_scalars: None,
    })
}

/// Counters from one instrumented forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Measurement {
    pub madds: u64,
    pub peak_scalars: u64,
    pub wall_ms: f64,
}

/// Run one layer forward on random tokens with an inference tape and read
/// back the counters. Peak excludes the parameters and the input.
pub fn measure(cfg: SsmConfig, tokens: usize, seed: u64) -> Result<Measurement> {
    let mut rng = stream(seed, INIT_STREAM);
    let mut store = ParamStore::new();
    let layer = SsmLayerParams::init(&mut store, "bench", cfg, &mut rng)?;
    let x = Tensor::randn([tokens, cfg.channels], 1.0, &mut rng);
    let mut tape = Tape::inference();
    let binds = store.bind(&mut tape);
    let xv = tape.constant(x);
    instrument::reset();
    let base = instrument::snapshot().live_scalars;
    let start = Instant::now();
    res_mamba_layer(&mut tape, &binds, xv, &layer)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let snap = instrument::snapshot();
    Ok(Measurement {
        madds: snap.madds,
        peak_scalars: snap.peak_scalars - base,
        wall_ms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub frames: usize,
    pub cost: CostModel,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Skipped {
    pub kind: BlockKind,
    pub frames: usize,
    pub tokens: usize,
    pub predicted_peak: u64,
}

/// Measured cost growth between two frame counts of one kind.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Growth {
    pub kind: BlockKind,
    pub from_tokens: usize,
    pub to_tokens: usize,
    pub madds_ratio: f64,
    pub peak_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub skipped: Vec<Skipped>,
    pub budget: usize,
}

/// Layer config for `kind` at the bench dims of `cfg`. Attention has no scan
/// direction, so it always runs unidirectionally.
pub fn bench_layer(cfg: &Config, kind: BlockKind) -> SsmConfig {
    SsmConfig {
        channels: cfg.bench_channels,
        expand: cfg.bench_expand,
        d_state: cfg.bench_d_state,
        conv_kernel: cfg.conv_kernel,
        variant: if kind == BlockKind::Attention { ScanVariant::None } else { cfg.variant },
        block: kind,
        residual: true,
    }
}

pub const GROWTH_CHECK_MIN_TOKENS: usize = 2040;

pub const KINDS: [BlockKind; 3] = [BlockKind::Mamba, BlockKind::MambaOut, BlockKind::Attention];

/// Measure every kind at every `frames` count (`frames * sum s^2` tokens).
/// Points whose predicted peak exceeds `cfg.bench_budget` are skipped.
pub fn sweep(cfg: &Config, kinds: &[BlockKind], frames: &[usize]) -> Result<BenchReport> {
    if frames.is_empty() || frames.windows(2).any(|w| w[0] >= w[1]) || frames[0] == 0 {
        return Err(Error::Config(format!("bench frames must be positive and ascending, got {frames:?}")));
    }
    let per_frame = cfg.scale_set()?.tokens_per_frame();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &kind in kinds {
        let layer = bench_layer(cfg, kind);
        for &f in frames {
            let tokens = f * per_frame;
            let mut cost = predict_cost(layer, tokens)?;
            if cost.predicted_peak > cfg.bench_budget as u64 {
                skipped.push(Skipped {
                    kind,
                    frames: f,
                    tokens,
                    predicted_peak: cost.predicted_peak,
                });
                continue;
            }
            let m = measure(layer, tokens, cfg.seed)?;
            cost.measured_madds = Some(m.madds);
            cost.peak_scalars = Some(m.peak_scalars);
            rows.push(BenchRow {
                frames: f,
                cost,
                wall_ms: m.wall_ms,
            });
        }
    }
    Ok(BenchReport {
        rows,
        skipped,
        budget: cfg.bench_budget,
    })
}

impl BenchReport {
    pub fn row(&self, kind: BlockKind, frames: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.cost.kind == kind && r.frames == frames)
    }

    /// Measured growth for every pair of measured points where the token count doubles.
    pub fn doublings(&self) -> Vec<Growth> {
        let mut out = Vec::new();
        for a in &self.rows {
            for b in &self.rows {
                if a.cost.kind == b.cost.kind && b.cost.tokens == 2 * a.cost.tokens {
                    let ratio = |x: Option<u64>, y: Option<u64>| y.unwrap_or(0) as f64 / x.unwrap_or(0).max(1) as f64;
                    out.push(Growth {
                        kind: a.cost.kind,
                        from_tokens: a.cost.tokens,
                        to_tokens: b.cost.tokens,
                        madds_ratio: ratio(a.cost.measured_madds, b.cost.measured_madds),
                        peak_ratio: ratio(a.cost.peak_scalars, b.cost.peak_scalars),
                    });
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(COST_HEADER);
        s.push_str("kind,frames,tokens,predicted_madds,measured_madds,peak_scalars,wall_ms\n");
        for r in &self.rows {
            let c = &r.cost;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.3}",
                c.kind,
                r.frames,
                c.tokens,
                c.predicted_madds,
                c.measured_madds.unwrap_or(0),
                c.peak_scalars.unwrap_or(0),
                r.wall_ms
            );
        }
        s
    }

    /// Growth ratios and their range checks (attention quadratic, the scan
    /// linear). Ranges are only checked from [`GROWTH_CHECK_MIN_TOKENS`] up,
    /// below that the linear terms of attention still dominate.
    pub fn summary(&self) -> serde_json::Value {
        let checks: Vec<_> = self
            .doublings()
            .into_iter()
            .map(|g| {
                let (lo, hi) = match g.kind {
                    BlockKind::Attention => (3.2, 4.2),
                    _ => (1.9, 2.3),
                };
                serde_json::json!({
                    "kind": g.kind.to_string(),
                    "from_tokens": g.from_tokens,
                    "to_tokens": g.to_tokens,
                    "madds_ratio": g.madds_ratio,
                    "peak_ratio": g.peak_ratio,
                    "range": [lo, hi],
                    "checked": g.from_tokens >= GROWTH_CHECK_MIN_TOKENS,
                    "pass": (lo..=hi).contains(&g.madds_ratio),
                })
            })
            .collect();
        let skipped: Vec<_> = self
            .skipped
            .iter()
            .map(|s| {
                serde_json::json!({
                    "kind": s.kind.to_string(),
                    "frames": s.frames,
                    "tokens": s.tokens,
                    "predicted_peak": s.predicted_peak,
                    "budget": self.budget,
                })
            })
            .collect();
        serde_json::json!({ "growth": checks, "skipped": skipped })
    }
}
