//! `nclkit` command-line entry point.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 data error,
//! 4 numerical failure.

mod analyze;
mod config;
mod eval;
mod io;
mod normalize;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "nclkit", version, about = "Normalized contrastive retrieval toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute instance biases for a text × video embedding pair.
    Normalize(normalize::NormalizeArgs),
    /// Retrieval metrics with optional bias adjustment.
    Eval(eval::EvalArgs),
    /// Train linear encoders on synthetic data.
    Train(TrainArgs),
    /// Train once and sweep the test-time queue size.
    Sweep(SweepArgs),
    /// Modal decomposition, similarity statistics and false-rate profiles.
    Analyze(analyze::AnalyzeArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: train::TrainFlags,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: train::TrainFlags,
    /// Queue sizes to evaluate, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
}

/// Error categories that map to exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure::Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => 2,
                Failure::Data(_) => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<nclkit::Error>() {
            return match e {
                e if e.is_numerical() => 4,
                nclkit::Error::InvalidParameter { .. } | nclkit::Error::InvalidPrior(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("NCLKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| usage(format!("NCLKIT_THREADS must be a nonnegative integer, got {raw:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Normalize(a) => normalize::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Train(a) => train::run_train(&a.common),
        Command::Sweep(a) => train::run_sweep(&a.common, &a.sizes),
        Command::Analyze(a) => analyze::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// Output directory argument shared by all commands.
#[derive(Args, Debug, Clone)]
pub struct OutDir {
    /// Directory for output files (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}
