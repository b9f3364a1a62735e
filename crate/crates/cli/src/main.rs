//! `imgrisk`: extract zero-shot image features, evaluate logistic risk
//! models over repeated splits, compare models, run group statistics and
//! generate synthetic cohorts.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "imgrisk",
    version,
    about = "Interpretable image-based risk prediction"
)]
struct Cli {
    /// Worker threads for scoring and splits (0 = all cores)
    #[arg(long, global = true, env = "IMGRISK_THREADS")]
    threads: Option<usize>,
    /// TOML file with one table per subcommand; flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score images against the schema and average per user
    Extract(config::ExtractArgs),
    /// Repeated random-split AUC evaluation of a logistic model
    Eval(config::EvalArgs),
    /// t-test between the per-run AUCs of two eval reports
    Compare(config::CompareArgs),
    /// Group t-tests, FDR, complement pruning and full-sample regression
    Stats(config::StatsArgs),
    /// Generate a synthetic cohort
    Synth(config::SynthArgs),
}

/// A failed run and its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<imgrisk_core::Error> for Failure {
    fn from(e: imgrisk_core::Error) -> Self {
        if e.is_input_error() {
            Failure::input(e.to_string())
        } else {
            Failure::internal(e.to_string())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::internal(format!("thread pool: {e}")))?;
    }
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::Extract(a) => commands::extract(config::resolve("extract", cfg, &a)?),
        Command::Eval(a) => commands::eval(config::resolve("eval", cfg, &a)?),
        Command::Compare(a) => commands::compare(config::resolve("compare", cfg, &a)?),
        Command::Stats(a) => commands::stats(config::resolve("stats", cfg, &a)?),
        Command::Synth(a) => commands::synth(config::resolve("synth", cfg, &a)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
