//! The `ibra` command line: datasets, training, lowering, inference,
//! verification, energy reports and the range and gradient diagnostics.
//!
//! Every command writes its outputs into `--out DIR` together with the
//! resolved configuration (`config.toml`). Configuration is resolved as
//! defaults, then flags, then the config file given by `--config` or the
//! `IBRA_CONFIG` environment variable.
//!
//! Exit codes: `0` success, `1` usage or input error, `2` verification
//! failure, `3` non-finite numbers.

mod commands;
mod config;
mod reports;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::energy::EnergyError;
use crate::lowering::LoweringError;
use crate::network::{CheckpointError, DatasetError, NetworkError};
use crate::tensor::{OptimError, TensorError};

pub use config::{
    Arch, ConfigOverrides, EncodingChoice, NeuronChoice, OptimizerChoice, RunConfig, CONFIG_ENV, RESOLVED_CONFIG_FILE,
};
pub use reports::{
    feature_stats, gradient_probe, range_coverage, standardize, LayerRange, ProbeRow, RangeCoverageReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFICATION: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Lowering(#[from] LoweringError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => EXIT_VERIFICATION,
            CliError::NonFinite(_)
            | CliError::Network(NetworkError::NonFinite { .. })
            | CliError::Network(NetworkError::Optim(OptimError::NonFiniteGradient { .. })) => EXIT_NON_FINITE,
            _ => EXIT_USAGE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ibra", version, about = "Integer-binary spiking networks: train, lower, verify, price")]
pub struct Cli {
    /// TOML config file; its values override flags. Defaults to $IBRA_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write a checkpoint with per-epoch metrics.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Lower a training checkpoint (converting activations first if needed)
    /// and verify it against the original.
    Lower {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify the held-out split with a training or lowered checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a training checkpoint with its lowered form.
    Verify {
        #[arg(long)]
        trained: PathBuf,
        #[arg(long)]
        lowered: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Price ANN, LIF, unary and bit-plane execution of the same weights.
    Energy {
        #[arg(long)]
        trained: PathBuf,
        #[arg(long)]
        lowered: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Histogram emitted levels per neuron layer.
    RangeReport {
        /// Report on this training checkpoint.
        #[arg(long, required_unless_present = "paired", conflicts_with = "paired")]
        checkpoint: Option<PathBuf>,
        /// Train `N = 1` and range-aligned runs with the same `D_N` and
        /// compare them.
        #[arg(long)]
        paired: bool,
        /// Shared integer ceiling `D_N` of the paired runs.
        #[arg(long, default_value_t = 15)]
        ceiling: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and record per-layer gradient magnitudes, plus a scaling probe.
    GradReport {
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Lower { .. } => "lower",
            Command::Infer { .. } => "infer",
            Command::Verify { .. } => "verify",
            Command::Energy { .. } => "energy",
            Command::RangeReport { .. } => "range-report",
            Command::GradReport { .. } => "grad-report",
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            print!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command and returns its stdout summary.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    let file = cli.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let cfg = RunConfig::resolve(&cli.overrides, file.as_deref())?;
    commands::dispatch(&cli.command, &cfg)
}
