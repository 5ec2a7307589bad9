use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stagepool_cli::commands::{cmd_compare, cmd_run, cmd_validate, parse_seeds};
use stagepool_cli::CliError;

#[derive(Parser)]
#[command(name = "stagepool", version, about = "Simulate stage-aware LLM engine pools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config and its workflow without simulating.
    Validate {
        /// TOML file or `preset:NAME`.
        config: String,
    },
    /// Run one simulation and write summary.json plus trace CSVs.
    Run {
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every compare cell over a seed range.
    Compare {
        config: String,
        /// `A..B`, `A..=B`, `A,B,C` or a single seed.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Validate { config } => {
            cmd_validate(&config)?;
            println!("ok");
        }
        Command::Run { config, seed, out } => {
            cmd_run(&config, seed, out)?;
        }
        Command::Compare { config, seeds, out } => {
            let seeds = seeds.as_deref().map(parse_seeds).transpose()?;
            cmd_compare(&config, seeds, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
