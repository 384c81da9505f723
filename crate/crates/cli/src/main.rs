use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use newsret_cli::{run_command, CliError, Command, Run, RunConfig};

/// News-to-return forecasting pipeline.
#[derive(Parser, Debug)]
#[command(name = "newsret", version)]
struct Args {
    /// Stage to run.
    #[arg(value_enum)]
    command: Command,
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            eprintln!("{}", first.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(1);
        }
    };
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let name = args.command.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
            eprintln!("newsret {name}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(args: &Args) -> Result<(), CliError> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let run = Run::new(config, &args.config, args.out.clone());
    run_command(args.command, &run)
}
