use std::path::PathBuf;
use std::process::ExitCode;

use cimq_cli::commands::{self, SweepAxis};
use cimq_cli::config::parse_override;
use cimq_cli::{ExperimentConfig, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cimq", version, about = "Compute-in-memory quantization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Root seed, replacing the config's.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, replacing the config's.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` on a dotted config path; the value is parsed as JSON.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Granularity,
    Sigma,
    PBits,
}

#[derive(Subcommand)]
enum Command {
    /// Test accuracy and partial-sum trace of a trained model.
    Infer(Common),
    /// Train with per-epoch checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Accuracy over granularity combinations, sigma or partial-sum bits.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Per-column integer partial-sum histograms of one conv layer.
    Histogram {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        layer: usize,
    },
    /// Dequantization and scale-storage overhead per layer.
    CostReport(Common),
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut ov = c.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = c.seed {
        ov.push(("seed".into(), seed.into()));
    }
    if let Some(out) = &c.out {
        ov.push(("output_dir".into(), out.to_string_lossy().into_owned().into()));
    }
    ExperimentConfig::load(&c.config, &ov)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Infer(c) => {
            let acc = commands::cmd_infer(&load(&c)?)?;
            println!("accuracy {acc}");
        }
        Command::Train { common, resume } => {
            let state = commands::cmd_train(&load(&common)?, resume.as_deref())?;
            if let Some(e) = state.log.last() {
                println!("epoch {} loss {} acc {} steps {}", e.epoch, e.loss, e.acc, e.steps);
            }
        }
        Command::Sweep { common, axis } => {
            let axis = match axis {
                Axis::Granularity => SweepAxis::Granularity,
                Axis::Sigma => SweepAxis::Sigma,
                Axis::PBits => SweepAxis::PBits,
            };
            let path = commands::cmd_sweep(&load(&common)?, axis)?;
            println!("wrote {}", path.display());
        }
        Command::Histogram { common, layer } => {
            let path = commands::cmd_histogram(&load(&common)?, layer)?;
            println!("wrote {}", path.display());
        }
        Command::CostReport(c) => {
            let r = commands::cmd_cost_report(&load(&c)?)?;
            println!("dequant_mults {} stored_fused {}", r.total_dequant_mults, r.total_stored_fused);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
