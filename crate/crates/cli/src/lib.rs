//! Command-line harness binding the analysis pipeline together: model
//! creation and toy training, influence/saliency analysis, truncation
//! comparisons and cliff-layer sweeps.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;

use clap::{Parser, Subcommand};

/// An error the user can fix by changing flags or config values; mapped to
/// exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub(crate) fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

#[derive(Parser)]
#[command(name = "flowscope", version, about = "Information-flow analysis for a miniature multimodal transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a seeded model checkpoint.
    InitModel(config::InitArgs),
    /// Train a checkpoint on a synthetic single-token-answer task.
    TrainToy(config::TrainArgs),
    /// Emit per-layer attention shares and saliency overlays for one input.
    Analyze(config::AnalyzeArgs),
    /// Compare baseline inference against attention-ranked image-token
    /// truncation.
    Truncate(config::TruncateArgs),
    /// Sweep full truncation across layers and report cliff layers.
    Cliff(config::CliffArgs),
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::InitModel(args) => commands::run_init(&args.resolve()?),
        Command::TrainToy(args) => commands::run_train(&args.resolve()?),
        Command::Analyze(args) => commands::run_analyze(&args.resolve()?).map(|_| ()),
        Command::Truncate(args) => commands::run_truncate(&args.resolve()?).map(|_| ()),
        Command::Cliff(args) => commands::run_cliff(&args.resolve()?).map(|_| ()),
    }
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
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<UsageError>()) {
                2
            } else {
                1
            }
        }
    }
}
