//! Command-line driver: `train`, `eval`, `theory` and `baseline` runs, each
//! writing into one output directory described by a run manifest.

mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use stackmac::baselines::PolicyKind;

pub use commands::{MappoCheckpoint, MAPPO_CHECKPOINT_FORMAT};
pub use manifest::{OutputEntry, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_THEORY: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "stackmac", version, about = "Train, evaluate and analyse leader/follower uplink MAC policies")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, env = "STACKMAC_SEED")]
    pub seed: Option<u64>,
    /// Output directory; defaults to `runs/<subcommand>`.
    #[arg(long, global = true, env = "STACKMAC_OUT")]
    pub out: Option<PathBuf>,
    /// Rollout worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Omit wall-clock fields so reruns produce identical logs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train leader and follower token policies.
    Train {
        /// Continue from a trainer checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate policies over the configured scenario grid.
    Eval {
        /// Directory holding `leader.json`/`follower.json` or `mappo.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Policies to evaluate, comma separated.
        #[arg(long = "policy-type", value_delimiter = ',', default_value = "token")]
        policy_type: Vec<PolicyKind>,
    },
    /// Run the equilibrium theory suite.
    Theory,
    /// Train (MAPPO) or configure (ALOHA) a baseline and evaluate it.
    Baseline {
        #[arg(long = "policy-type")]
        policy_type: PolicyKind,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Theory => "theory",
            Command::Baseline { .. } => "baseline",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] stackmac::Error),
    #[error("theory suite failed: {0}")]
    TheoryFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(stackmac::Error::Config { .. } | stackmac::Error::Size { .. }) => EXIT_USAGE,
            CliError::Core(_) => EXIT_RUNTIME,
            CliError::TheoryFailed(_) => EXIT_THEORY,
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
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
    match commands::dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if let CliError::Core(stackmac::Error::HashMismatch { checkpoint, config }) = &e {
                eprintln!("error: refusing checkpoint built for a different configuration");
                eprintln!("  checkpoint hash: {checkpoint}");
                eprintln!("  config hash:     {config}");
            } else {
                eprintln!("error: {e}");
            }
            e.exit_code()
        }
    }
}
