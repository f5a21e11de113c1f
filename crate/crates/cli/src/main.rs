//! `baselayer` command-line tool.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 parse error, 3 contract
//! violation, 4 divergence during training.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{CommonArgs, RunConfig};
use failure::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "baselayer",
    version,
    about = "Balanced expert routing: solver, simulator, toy trainer, reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Balanced assignment of a token-by-expert score matrix in CSV form.
    Solve {
        scores: PathBuf,
        /// Use the exact solver instead of the auction.
        #[arg(long)]
        oracle: bool,
    },
    /// Route random tokens through the simulated workers.
    Simulate {
        /// Replace every expert network with zeros.
        #[arg(long)]
        experts_zero: bool,
    },
    /// Train on the clustered toy task and write a checkpoint.
    Train,
    /// Balance and specialization reports for a checkpoint.
    Analyze { checkpoint: PathBuf },
    /// Time the routing pipeline across expert counts and depths.
    Bench,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Solve { .. } => "solve",
            Command::Simulate { .. } => "simulate",
            Command::Train => "train",
            Command::Analyze { .. } => "analyze",
            Command::Bench => "bench",
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(cli.command.name(), &cli.common)?;
    match &cli.command {
        Command::Solve { scores, oracle } => commands::solve(&cfg, scores, *oracle),
        Command::Simulate { experts_zero } => commands::simulate(&cfg, *experts_zero),
        Command::Train => commands::train(&cfg),
        Command::Analyze { checkpoint } => commands::analyze(&cfg, checkpoint),
        Command::Bench => commands::bench(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
