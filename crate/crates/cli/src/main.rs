#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod args;
mod artifact;
mod commands;

use std::path::Path;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

/// Usage errors exit with 1, data errors with 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    fn in_file(self, path: &Path) -> Self {
        match self {
            CliError::Data(m) if !m.starts_with(&path.display().to_string()) => {
                CliError::Data(format!("{}: {m}", path.display()))
            }
            other => other,
        }
    }
}

impl From<knnmt::Error> for CliError {
    fn from(e: knnmt::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::BuildDatastore(a) => commands::build_datastore(a),
        Command::Decode(a) => commands::decode(a),
        Command::GridSearch(a) => commands::grid_search_cmd(a),
        Command::Diversify(a) => commands::diversify_cmd(a),
        Command::SelectData(a) => commands::select_data(a),
        Command::LeaveOneOut(a) => commands::leave_one_out(a),
        Command::Score(a) => commands::score(a),
        Command::Filter(a) => commands::filter(a),
        Command::TrainLm(a) => commands::train_lm(a),
        Command::MakeBenchmark(a) => commands::make_benchmark(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
