mod commands;
mod config;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

pub use commands::Cli;

/// Usage problems (bad flags, missing inputs, conflicting options) exit with 2,
/// failures while running exit with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<babyrlhf_core::Error>() {
            Some(babyrlhf_core::Error::Config(_)) => CliError::Usage(format!("{e:#}")),
            _ => CliError::Runtime(e),
        }
    }
}

impl From<babyrlhf_core::Error> for CliError {
    fn from(e: babyrlhf_core::Error) -> Self {
        match e {
            babyrlhf_core::Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other.into()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cmd = Cli::command();
    let argv = match config::apply(&cmd, std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return report(e),
    };
    let cli = match cmd.try_get_matches_from(argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    match e {
        CliError::Usage(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        CliError::Runtime(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
