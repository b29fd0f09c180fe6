use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedlab_cli::{compare_command, exit_code, run_command, RunOptions};

#[derive(Parser)]
#[command(name = "fedlab", version, about = "Deterministic federated-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment; writes metrics.csv, summary.json and manifest.json.
    Run(Args),
    /// Run every (algorithm, seed) cell of a comparison file.
    Compare(Args),
}

#[derive(clap::Args)]
struct Args {
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed (or seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for client-parallel local training.
    #[arg(long)]
    threads: Option<usize>,
}

impl Args {
    fn options(&self) -> RunOptions {
        let default = RunOptions::default();
        RunOptions {
            seed: self.seed,
            threads: self.threads.unwrap_or(default.threads).max(1),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run_command(&a.config, &a.out, a.options()),
        Command::Compare(a) => compare_command(&a.config, &a.out, a.options()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
