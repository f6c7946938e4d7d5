//! Command-line harness around the commscale library: single-cell training,
//! the label/agent scaling sweeps, protocol analysis, and result reporting.
//!
//! Exit codes: 0 success, 1 rejected input, 2 a validated run failed.

pub mod analyze;
pub mod report;
pub mod runner;
pub mod spec;

use clap::{Args, Parser, Subcommand};
use commscale::model::EncoderKind;
use commscale::optim::OptimizerKind;
use spec::GridChoice;
use std::ffi::OsString;
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUN: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Rejected before anything ran; nothing was written.
    Validation(String),
    /// A validated run failed while executing or writing artifacts.
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Run(_) => EXIT_RUN,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Run(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "commscale",
    version,
    about = "Experiment harness for learned inter-agent communication"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train one (agents, labels, encoder) cell across seeds.
    Train(TrainArgs),
    /// Run a scaling grid across all three encoders and aggregate.
    Sweep(SweepArgs),
    /// Extract and analyze the communication protocol of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Summarize a results directory as a per-cell table.
    Report(ReportArgs),
}

/// Flags shared by train and sweep. Unset values fall back to the config
/// file, then to the built-in defaults.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonRunArgs {
    /// Hidden state and message width M.
    #[arg(long)]
    pub message_size: Option<usize>,
    /// Communication rounds S (0 is forced for the none encoder).
    #[arg(long)]
    pub comm_steps: Option<usize>,
    /// Entropy bonus weight (default depends on the agent count).
    #[arg(long)]
    pub beta: Option<f64>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Episodes per update.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Parameter updates per run.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Optimizer: adam or sgd.
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    /// Single seed shorthand.
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seed list (default 1,2,3,4,5).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output directory root.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// TOML config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Agent count N.
    #[arg(long)]
    pub agents: Option<usize>,
    /// Label pool size L.
    #[arg(long)]
    pub labels: Option<usize>,
    /// Encoder: mean, attention or none.
    #[arg(long)]
    pub encoder: Option<EncoderKind>,
    #[command(flatten)]
    pub common: CommonRunArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Grid: scale-labels, scale-agents or all (default).
    #[arg(long)]
    pub grid: Option<GridChoice>,
    /// Concurrent (cell, seed) runs (default: available cores).
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[command(flatten)]
    pub common: CommonRunArgs,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Parameter checkpoint to analyze.
    pub checkpoint: PathBuf,
    /// The two message coordinates to fit (default: highest variance).
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Expected label count; must match the checkpoint.
    #[arg(long)]
    pub labels: Option<usize>,
    /// Output directory (default: next to the checkpoint).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Results directory written by train or sweep.
    pub dir: PathBuf,
}

/// Parses and runs, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(args) => runner::cmd_train(args),
        Command::Sweep(args) => runner::cmd_sweep(args),
        Command::Analyze(args) => analyze::cmd_analyze(args),
        Command::Report(args) => report::cmd_report(args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
