//! `fedcmd` — partition datasets, run federated strategies, compare reports.
//!
//! Exit codes are stable: 0 success, 2 configuration/validation failure,
//! 3 numeric failure (non-finite gradients).

mod commands;


use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};


#[derive(Parser)]
#[command(
    name = "fedcmd",
    about = "Desk-scale two-phase federated learning simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a Dirichlet non-IID partition plan and print class histograms.
    Partition(PartitionArgs),
    /// Execute one strategy end to end and write report.json + rounds.csv.
    Run(RunArgs),
    /// Compare finished runs: comparison table and plot CSVs.
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct PartitionArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the data seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Reuse a previously written partition plan instead of deriving one.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Override the configured strategy.
    #[arg(long)]
    strategy: Option<String>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the evaluation cadence.
    #[arg(long)]
    eval_every: Option<u32>,
    /// Worker threads (0 = library default); results do not depend on it.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Save model checkpoints every N rounds under OUT/checkpoints.
    #[arg(long)]
    checkpoint_every: Option<u32>,
    /// Dump per-round similarity matrices under OUT/similarity.
    #[arg(long)]
    dump_similarity: bool,
    /// Validate the config, print the communication forecast, and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// One or more report.json files from finished runs.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Output directory for the comparison artifacts.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Partition(args) => commands::partition(args),
        Command::Run(args) => commands::run(args),
        Command::Report(args) => commands::report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
