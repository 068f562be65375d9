use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use poseidon_cli::{execute, exit, threads_from_env, Cli, CliError, THREADS_ENV};

fn run() -> Result<(), CliError> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => exit::USAGE,
            };
            // clap renders its own usage text.
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let level = match cli.command.common().verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    let threads = threads_from_env(std::env::var(THREADS_ENV).ok().as_deref())?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    }
    execute(&cli)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("poseidon: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
