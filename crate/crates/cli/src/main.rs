//! `d2d`: simulate, fit, diagnose, predict, compare and run studies.

mod args;
mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = args::Cli::parse();
    match commands::run(&cli) {
        Ok(outcome) => {
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            if cli.strict && !outcome.warnings.is_empty() {
                eprintln!("error: --strict and {} validation warning(s)", outcome.warnings.len());
                return ExitCode::from(commands::EXIT_VALIDATION);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
