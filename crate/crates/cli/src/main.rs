//! `ddad`: synthesize data, train dual ensembles, score, evaluate and sweep.

mod commands;
mod manifest;
mod options;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddad_core::DdadError;

use options::Options;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "ddad", version, about = "Dual-distribution discrepancy anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (normal, unlabeled, test) as PGM files
    Synth(Options),
    /// Train modules A and B; writes checkpoints and loss.csv
    Train(Options),
    /// Score the test images with trained checkpoints; writes scores.csv
    Score(Options),
    /// AUCs and histograms from scores.csv
    Eval(Options),
    /// Anomaly-rate sweep on synthetic data
    Sweep(Options),
    /// Method comparison table over backbones and score kinds
    Compare(Options),
}

fn configure_threads() -> Result<(), DdadError> {
    let Ok(value) = std::env::var("DDAD_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| DdadError::Config(format!("DDAD_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| DdadError::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), DdadError> {
    configure_threads()?;
    match cli.command {
        Command::Synth(o) => commands::synth(&o.resolve()?),
        Command::Train(o) => commands::train(&o.resolve()?),
        Command::Score(o) => commands::score(&o.resolve()?),
        Command::Eval(o) => commands::eval(&o.resolve()?),
        Command::Sweep(o) => commands::sweep(&o.resolve()?),
        Command::Compare(o) => commands::compare(&o.resolve()?),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.module());
            ExitCode::FAILURE
        }
    }
}
