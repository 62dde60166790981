//! `tumorseg` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod commands;
mod config;
mod manifest;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<tumorseg::Error> for CliError {
    fn from(e: tumorseg::Error) -> Self {
        match e {
            tumorseg::Error::InvalidConfig(_) => CliError::Usage(e.to_string()),
            tumorseg::Error::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "tumorseg", version, about = "Brain-tumour segmentation pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out` in the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for per-case work.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Single worker thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic cases.
    Phantom {
        #[arg(long)]
        count: Option<usize>,
        /// Apply the low-quality domain profile instead of the configured one.
        #[arg(long)]
        degraded: bool,
    },
    /// Train the super-resolution network on pairs built from a dataset.
    SrTrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Upscale a dataset 2× with a trained super-resolution checkpoint.
    Superres {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the baseline and expanded networks under one strategy.
    Train {
        /// S_GLI_to_SSA, S_SSA or S_srSSA.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        sr_checkpoint: Option<PathBuf>,
        /// Target-phase step budget.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        pretrain_steps: Option<usize>,
    },
    /// Segment every case of a directory, ensembling the given checkpoints.
    Infer {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        sr_checkpoint: Option<PathBuf>,
        /// Also write per-region probability volumes.
        #[arg(long)]
        save_probabilities: bool,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Row label in the summary table.
        #[arg(long)]
        label: Option<String>,
    },
    /// Summarize metrics files and render slice overlays.
    Report {
        /// `PATH` or `LABEL=PATH`; repeat for several table rows.
        #[arg(long = "metrics", required = true)]
        metrics: Vec<String>,
        /// Dataset whose images are drawn under the overlays.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Predicted labels to overlay instead of the ground truth.
        #[arg(long)]
        pred: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli.global, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tumorseg: {e}");
            ExitCode::from(e.code())
        }
    }
}
