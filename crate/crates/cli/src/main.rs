mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::{json, Value};

use crate::args::{Cli, Command};
use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dppnet::error::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error("writing output: {0}")]
    Output(#[from] std::io::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::CheckFailed(_) => "check_failed",
            CliError::Output(_) => "io",
        }
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(code)
}

fn print(value: &Value) -> Result<(), CliError> {
    commands::write_lines(std::slice::from_ref(value))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&cli.global)?;
    match &cli.command {
        Command::Gen => print(&commands::gen(&cfg)?),
        Command::Train(a) => print(&commands::train_cmd(a, &cfg)?),
        Command::Eval(a) => print(&commands::eval(a, &cfg)?),
        Command::Predict(a) => Ok(commands::write_lines(&commands::predict(a, &cfg)?)?),
        Command::Gradcheck => {
            let (report, passed) = commands::gradcheck(&cfg)?;
            print(&report)?;
            if passed {
                Ok(())
            } else {
                Err(CliError::CheckFailed("one or more oracle checks failed".into()))
            }
        }
        Command::HashStats(a) => print(&commands::hash_stats_cmd(a)?),
        Command::Retrieve(a) => print(&commands::retrieve(a, &cfg)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().trim(), 2),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), 1),
    }
}
