use std::process::ExitCode;

use clap::Parser;
use propvis_cli::{dispatch, Cli, Command};
use tracing_subscriber::EnvFilter;

fn main() -> ExitCode {
    let cli = Cli::parse();
    // The guest double owns stdout; keep logging on stderr and quiet there.
    let default = if matches!(cli.command, Command::GuestDouble(_)) { "error" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default)))
        .with_writer(std::io::stderr)
        .init();

    match dispatch(&cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprintln!("propvis: {failure}");
            ExitCode::from(failure.kind.code())
        }
    }
}
