//! `rouser` command line: train, eval, threshold sweeps, threshold-learning
//! ablations, synthetic data generation, NMNIST conversion and inspection.
//!
//! Exit codes: 0 success, 2 data error, 3 config error, 4 numeric failure.

mod commands;
mod inspect;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;

pub use commands::{
    ablate, convert_nmnist, eval, gen_synthetic, resolve_config, sweep_th, train,
    verify_fingerprints, AblationRun, EvalReport, SweepPoint, TrainReport,
};
pub use inspect::inspect;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Error carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn data(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_DATA,
            error: e.into(),
        }
    }

    pub fn config(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_CONFIG,
            error: e.into(),
        }
    }

    pub fn numeric(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_NUMERIC,
            error: e.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parse { .. } | Error::Validation { .. } => EXIT_CONFIG,
            Error::NonFinite(_) => EXIT_NUMERIC,
            Error::Shape(_) | Error::Format(_) | Error::Data(_) | Error::Io { .. } => EXIT_DATA,
        };
        Self {
            code,
            error: e.into(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "rouser",
    version,
    about = "Train spiking networks with learnable spiking thresholds"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one network and write metrics plus checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Fixed-threshold runs over a grid of initial thresholds.
    SweepTh(SweepArgs),
    /// Runs from one shared initial network over several threshold learning rates.
    Ablate(AblateArgs),
    /// Write the synthetic dataset as neutral-format event files.
    GenSynthetic(GenArgs),
    /// Convert an NMNIST class-folder tree to neutral-format files.
    ConvertNmnist(ConvertArgs),
    /// Describe an event file, checkpoint, or dataset directory.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Config file in `key = value` form.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr_th=0`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset root holding `train/` and `test/` class folders.
    #[arg(long, conflicts_with = "synthetic")]
    pub data_dir: Option<PathBuf>,
    /// Use the built-in synthetic task (`synth_*` config keys).
    #[arg(long)]
    pub synthetic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Root for all outputs.
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Subdirectory of `--out-dir` for this run.
    #[arg(long, default_value = "run")]
    pub run_name: String,
    /// Write real elapsed seconds into the metrics (otherwise 0, keeping
    /// repeated runs byte-identical).
    #[arg(long)]
    pub timing: bool,
    /// Also write `dead_per_batch.csv` with the dead-neuron percentage of
    /// every training batch.
    #[arg(long)]
    pub per_batch_dead: bool,
    /// Stop after N epochs without test-accuracy improvement.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Stop after this many seconds of training (checked between epochs).
    #[arg(long)]
    pub time_budget_secs: Option<f64>,
    /// Report the first epoch reaching this test accuracy.
    #[arg(long, default_value_t = 0.95)]
    pub target_acc: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Include optimizer moments in checkpoints so training can resume exactly.
    #[arg(long)]
    pub save_optimizer: bool,
    /// Continue from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// `test` or `train`.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated initial thresholds.
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<f64>,
    /// Grid points trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated threshold learning rates.
    #[arg(long = "lr-th", value_delimiter = ',', required = true)]
    pub lr_th: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ConvertArgs {
    /// NMNIST root (e.g. containing `Train/0/*.bin`).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

fn configure_threads() {
    if let Some(n) = std::env::var("ROUSER_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => {
            let report = train(&args)?;
            println!("{report}");
        }
        Command::Eval(args) => {
            let report = eval(&args)?;
            println!("{report}");
        }
        Command::SweepTh(args) => {
            let points = sweep_th(&args)?;
            for p in points {
                println!(
                    "th_init={} final_accuracy={}",
                    p.th_init,
                    crate::diagnostics::fmt_sig(p.final_accuracy)
                );
            }
        }
        Command::Ablate(args) => {
            let runs = ablate(&args)?;
            for r in runs {
                println!(
                    "lr_th={} final_accuracy={} epochs_to_target={} init_fingerprint={}",
                    r.lr_th,
                    crate::diagnostics::fmt_sig(r.final_accuracy),
                    r.epochs_to_target
                        .map_or("none".to_string(), |e| e.to_string()),
                    r.init_fingerprint
                );
            }
        }
        Command::GenSynthetic(args) => {
            let n = gen_synthetic(&args)?;
            println!("wrote {n} samples to {}", args.out_dir.display());
        }
        Command::ConvertNmnist(args) => {
            let n = convert_nmnist(&args)?;
            println!("converted {n} files into {}", args.output.display());
        }
        Command::Inspect(args) => {
            print!("{}", inspect(&args.path)?);
        }
    }
    Ok(())
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn main_entry() -> i32 {
    configure_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.error);
            e.code
        }
    }
}
