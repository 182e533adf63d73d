//! Ablation grids: one axis of the config is varied over a fixed row set,
//! every row is trained and evaluated on the same data and seed.

use std::fmt;
use std::str::FromStr;

use crate::aggregate::AggregationMode;
use crate::config::Config;
use crate::data::gen_data;
use crate::error::{Error, Result};
use crate::metrics::RetrievalReport;
use crate::ssm::{BlockKind, ScanVariant};
use crate::train::{eval, train};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Block,
    Scan,
    Aggregation,
    Scales,
    Layers,
    Residual,
}

pub const AXES: [Axis; 6] = [
    Axis::Block,
    Axis::Scan,
    Axis::Aggregation,
    Axis::Scales,
    Axis::Layers,
    Axis::Residual,
];

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Block => "block",
            Axis::Scan => "scan",
            Axis::Aggregation => "aggregation",
            Axis::Scales => "scales",
            Axis::Layers => "layers",
            Axis::Residual => "residual",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AXES.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = AXES.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown ablation axis {s:?}, expected one of {}", names.join("|")))
        })
    }
}

/// Labelled configs for every row of `axis`, derived from `base`.
pub fn grid(axis: Axis, base: &Config) -> Vec<(String, Config)> {
    let with = |f: &dyn Fn(&mut Config)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::Block => [BlockKind::Mamba, BlockKind::MambaOut, BlockKind::Attention]
            .into_iter()
            .map(|b| {
                let cfg = with(&|c| {
                    c.block = b;
                    if b == BlockKind::Attention {
                        c.variant = ScanVariant::None;
                    }
                });
                (b.to_string(), cfg)
            })
            .collect(),
        Axis::Scan => [ScanVariant::None, ScanVariant::V1, ScanVariant::V2]
            .into_iter()
            .map(|v| (v.to_string(), with(&|c| c.variant = v)))
            .collect(),
        Axis::Aggregation => [AggregationMode::ScaleWise, AggregationMode::FrameWise, AggregationMode::SpatialWise]
            .into_iter()
            .map(|m| (m.to_string(), with(&|c| c.aggregation = m)))
            .collect(),
        Axis::Scales => [vec![1], vec![1, 3], vec![1, 3, 7], vec![1, 3, 7, 14], vec![1, 3, 7, 14, 28]]
            .into_iter()
            .map(|s| {
                let label = format!("{{{}}}", s.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
                (label, with(&|c| c.scales = s.clone()))
            })
            .collect(),
        Axis::Layers => [0, 2, 4, 8, 16]
            .into_iter()
            .map(|l| (l.to_string(), with(&|c| c.layers = l)))
            .collect(),
        Axis::Residual => [true, false]
            .into_iter()
            .map(|r| {
                let label = if r { "residual" } else { "no_residual" };
                (label.to_string(), with(&|c| c.residual = r))
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub config: Config,
    pub report: RetrievalReport,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},r1,r5,r10,mdr,mnr,final_loss\n", self.axis);
        for r in &self.rows {
            let loss = r.final_loss.map(|l| format!("{l:.6}")).unwrap_or_default();
            s.push_str(&format!(
                "\"{}\",{},{},{},{},{},{}\n",
                r.label, r.report.r1, r.report.r5, r.report.r10, r.report.mdr, r.report.mnr, loss
            ));
        }
        s
    }
}

/// Train and evaluate every row of `axis`. The dataset is generated once
/// from `base` since no axis changes it. `on_row` sees each finished row.
pub fn reproduce(axis: Axis, base: &Config, mut on_row: impl FnMut(&AblationRow)) -> Result<AblationTable> {
    let rows = grid(axis, base);
    for (_, cfg) in &rows {
        cfg.validate()?;
    }
    let data = gen_data(base)?;
    let mut out = Vec::with_capacity(rows.len());
    for (label, cfg) in rows {
        let run = train(&cfg, &data, None)?;
        let report = eval(&run.model, &data)?;
        let row = AblationRow {
            label,
            final_loss: run.losses.last().copied(),
            config: cfg,
            report,
        };
        on_row(&row);
        out.push(row);
    }
    Ok(AblationTable { axis, rows: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_sets() {
        let base = Config::default();
        let labels = |a| grid(a, &base).into_iter().map(|r| r.0).collect::<Vec<_>>();
        assert_eq!(labels(Axis::Scales), ["{1}", "{1,3}", "{1,3,7}", "{1,3,7,14}", "{1,3,7,14,28}"]);
        assert_eq!(labels(Axis::Scan), ["none", "v1", "v2"]);
        assert_eq!(labels(Axis::Layers), ["0", "2", "4", "8", "16"]);
        assert_eq!(labels(Axis::Block), ["mamba", "mambaout", "attention"]);
        assert_eq!(labels(Axis::Aggregation), ["scale", "frame", "spatial"]);
        assert_eq!(labels(Axis::Residual), ["residual", "no_residual"]);
        for a in AXES {
            for (_, c) in grid(a, &base) {
                c.validate().unwrap();
                assert_eq!(c.seed, base.seed);
            }
        }
    }

    #[test]
    fn attention_row_runs_unidirectionally() {
        let rows = grid(Axis::Block, &Config::default());
        assert_eq!(rows[2].1.variant, ScanVariant::None);
        assert_eq!(rows[0].1.variant, Config::default().variant);
    }

    #[test]
    fn axis_names_round_trip() {
        for a in AXES {
            assert_eq!(a.to_string().parse::<Axis>().unwrap(), a);
        }
        assert!(matches!("depth".parse::<Axis>(), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_table() {
        let base = Config {
            train_pairs: 8,
            test_pairs: 4,
            patterns: 4,
            batch_size: 4,
            layers: 1,
            steps: 2,
            ..Config::default()
        };
        let mut seen = 0;
        let t = reproduce(Axis::Residual, &base, |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        let csv = t.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "residual,r1,r5,r10,mdr,mnr,final_loss");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("\"no_residual\","));
        assert_eq!(t, reproduce(Axis::Residual, &base, |_| {}).unwrap());
    }
}
