//! `segflow`: generate synthetic cities, train pooled congestion models,
//! fit per-segment BPR baselines and write the evaluation reports.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use segflow_core::domain::RoadPriority;

#[derive(Debug, Parser)]
#[command(name = "segflow", version, about)]
pub struct Cli {
    /// Experiment config (JSON). `gen` also accepts a bare city config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory; for `gen`, the data directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// City seed for `gen`; single training seed for the other commands.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Restrict to one road priority.
    #[arg(long, global = true)]
    pub priority: Option<RoadPriority>,
    /// Overwrite existing models.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic city: segments, observations and truth CSVs.
    Gen,
    /// Train one pooled model per priority and seed.
    Train,
    /// Fit the per-segment BPR baseline on the training weeks.
    FitBpr,
    /// Test-week metrics for the pooled model and the BPR baseline.
    Eval,
    /// Segment k-fold cross-validation.
    Crossval,
    /// Zero-shot transfer to the configured target cities.
    Transfer,
    /// Critical densities from ground truth, the pooled model and BPR.
    Critdens,
    /// Tab-separated plot series from existing reports.
    Plotdata,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::FitBpr => "fit-bpr",
            Command::Eval => "eval",
            Command::Crossval => "crossval",
            Command::Transfer => "transfer",
            Command::Critdens => "critdens",
            Command::Plotdata => "plotdata",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{} failed: {e:#}", cli.command.name());
            ExitCode::FAILURE
        }
    }
}
