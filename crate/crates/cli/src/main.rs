use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use scalescan::bench::{sweep, KINDS};
use scalescan::config::Config;
use scalescan::data::gen_data;
use scalescan::model::Model;
use scalescan::reproduce::{reproduce, Axis};
use scalescan::train::{eval, train_with};

/// Multi-scale video-token retrieval experiments on synthetic planted-signal data.
#[derive(Parser)]
#[command(name = "scalescan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset (videos.bin, texts.bin, meta.json).
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train and write a checkpoint plus the loss curve.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split and write report.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cost sweep over frame counts for mamba, mambaout and attention.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate every row of one ablation axis.
    Reproduce {
        /// block | scan | aggregation | scales | layers | residual
        axis: Axis,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(common: &Common) -> Result<Config> {
    let cfg = load_config(common)?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = prepare(&common)?;
            let data = gen_data(&cfg)?;
            data.save(&common.out)?;
            write(&common.out, "config.txt", &cfg.to_string())?;
        }
        Command::Train { common } => {
            let cfg = prepare(&common)?;
            let data = gen_data(&cfg)?;
            let dump = common.out.join("nan_batch");
            let log_every = (cfg.steps / 20).max(1);
            let run = train_with(&cfg, &data, Some(&dump), |step, loss| {
                if step % log_every == 0 || step + 1 == cfg.steps {
                    eprintln!("step {step:>6} loss {loss:.5}");
                }
            })?;
            run.model.save(&common.out)?;
            let mut curve = String::from("step,loss\n");
            for (i, l) in run.losses.iter().enumerate() {
                curve.push_str(&format!("{i},{l:?}\n"));
            }
            write(&common.out, "losses.csv", &curve)?;
        }
        Command::Eval { common, checkpoint } => {
            let ckpt = checkpoint.unwrap_or_else(|| common.out.clone());
            let cfg = match common.config {
                Some(_) => load_config(&common)?,
                None => {
                    let mut c = Config::load(ckpt.join("config.txt"))
                        .with_context(|| format!("reading config from checkpoint {}", ckpt.display()))?;
                    if let Some(seed) = common.seed {
                        c.seed = seed;
                    }
                    c
                }
            };
            fs::create_dir_all(&common.out)?;
            let model = Model::load(&cfg, &ckpt)?;
            let data = gen_data(&cfg)?;
            let report = eval(&model, &data)?;
            let json = report.to_json()?;
            let _ = writeln!(std::io::stdout(), "{json}");
            write(&common.out, "report.json", &json)?;
        }
        Command::Bench { common } => {
            let cfg = prepare(&common)?;
            let rep = sweep(&cfg, &KINDS, &cfg.bench_frames)?;
            for s in &rep.skipped {
                eprintln!(
                    "skipped {} at {} frames: predicted peak {} scalars exceeds budget {}",
                    s.kind, s.frames, s.predicted_peak, rep.budget
                );
            }
            write(&common.out, "bench.csv", &rep.to_csv())?;
            write(&common.out, "bench.json", &serde_json::to_string_pretty(&rep.summary())?)?;
        }
        Command::Reproduce { axis, common } => {
            let cfg = prepare(&common)?;
            let table = reproduce(axis, &cfg, |row| {
                eprintln!("{}: r1 {} r5 {} r10 {} mnr {}", row.label, row.report.r1, row.report.r5, row.report.r10, row.report.mnr);
            })?;
            write(&common.out, &format!("reproduce_{axis}.csv"), &table.to_csv())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
