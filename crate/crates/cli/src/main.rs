//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure (NaN/Inf reached the training loop).

mod commands;
mod config;

use beamflow::error::Error;
use clap::{Parser, Subcommand};
use config::{ModelKind, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "beamflow",
    about = "Vision-aided mmWave beam prediction: synthetic data, flow/recurrent training, evaluation, ablations, benchmarks",
    version
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Simulate {
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint + losses.csv + split.json.
    Train {
        /// Input dataset file.
        #[arg(long)]
        data: PathBuf,
        /// Which predictor to train: fm, rnn, or lstm.
        #[arg(long, default_value = "fm")]
        model: String,
        /// Window preset: A (8 history / 5 prediction) or B (3 / 10).
        #[arg(long)]
        variant: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from an earlier checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Beam index base of the input file (1 for 1-based exports).
        #[arg(long)]
        beam_base: Option<usize>,
    },
    /// Evaluate a checkpoint on the test side of a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split manifest written by `train`.
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated K values, e.g. 1,3.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long)]
        beam_base: Option<usize>,
    },
    /// Train and score the five-variant ablation grid on both window presets.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure single-sample inference latency of one or more checkpoints.
    Bench {
        /// Checkpoint files (repeatable).
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Timed samples (>= 1000).
        #[arg(long)]
        samples: Option<usize>,
        /// Warmup samples (>= 100).
        #[arg(long)]
        warmup: Option<usize>,
        /// Optional JSON output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Shape(_) => 1,
        Error::Data(_) | Error::Io(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_variant(cfg: &mut RunConfig, variant: Option<&str>) -> Result<(), Error> {
    match variant {
        None => Ok(()),
        Some("A") | Some("a") => {
            cfg.data.window = beamflow::data::WindowConfig {
                stride: cfg.data.window.stride,
                ..beamflow::data::WindowConfig::variant_a()
            };
            Ok(())
        }
        Some("B") | Some("b") => {
            cfg.data.window = beamflow::data::WindowConfig {
                stride: cfg.data.window.stride,
                ..beamflow::data::WindowConfig::variant_b()
            };
            Ok(())
        }
        Some(other) => Err(Error::config(format!(
            "unknown variant `{other}` (expected A or B)"
        ))),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Simulate { out } => commands::cmd_simulate(&cfg, &out),
        Command::Train {
            data,
            model,
            variant,
            out,
            resume,
            beam_base,
        } => {
            let kind: ModelKind = model.parse()?;
            apply_variant(&mut cfg, variant.as_deref())?;
            if let Some(base) = beam_base {
                cfg.data.beam_base = base;
            }
            commands::cmd_train(&cfg, &data, kind, &out, resume.as_deref())
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            k,
            beam_base,
        } => {
            if let Some(base) = beam_base {
                cfg.data.beam_base = base;
            }
            commands::cmd_eval(&cfg, &checkpoint, &data, &split, &out, k)
        }
        Command::Ablate { data, out } => commands::cmd_ablate(&cfg, &data, &out),
        Command::Bench {
            checkpoints,
            samples,
            warmup,
            out,
        } => commands::cmd_bench(&cfg, &checkpoints, samples, warmup, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not failures
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
