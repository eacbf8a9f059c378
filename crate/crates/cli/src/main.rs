//! `abstractnet`: train, abstract, verify and lift proofs for ReLU networks.
//!
//! Reports go to stdout as JSON, logs to stderr (`ABSTRACTNET_LOG`).
//! Exit codes: 0 success, 2 invalid input, 3 internal failure.

mod commands;
mod input;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{AbstractArgs, BenchArgs, LiftArgs, TrainArgs, VerifyArgs};

#[derive(Debug, Parser)]
#[command(
    name = "abstractnet",
    version,
    about = "Clustering-based abstraction and verification of ReLU networks"
)]
struct Cli {
    /// Worker threads for per-query work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a fully-connected ReLU classifier.
    Train(TrainArgs),
    /// Cluster and merge hidden neurons into an abstraction record.
    Abstract(AbstractArgs),
    /// Interval-bound robustness verification.
    Verify(VerifyArgs),
    /// Verify on the abstraction and lift proofs to the original network.
    Lift(LiftArgs),
    /// Compare verification on the original and abstract networks.
    Bench(BenchArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ABSTRACTNET_LOG", "warn"))
        .init();

    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }

    let result = match &cli.command {
        Command::Train(a) => commands::train_cmd(a),
        Command::Abstract(a) => commands::abstract_cmd(a),
        Command::Verify(a) => commands::verify_cmd(a),
        Command::Lift(a) => commands::lift_cmd(a),
        Command::Bench(a) => commands::bench_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
