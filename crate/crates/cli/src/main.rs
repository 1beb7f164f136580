//! `mcforecast`: conflict-state ingestion, prediction sets and coverage
//! studies from the command line.

mod commands;
mod manifest;
mod matrix_file;

use std::process::ExitCode;

use markov_conformal::Error;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ResourceCap { .. } => 2,
        Error::Io { .. } => 3,
        Error::Csv { source, .. } if source.is_io_error() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match commands::run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(e)) => {
            let _ = e.print();
            if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(commands::Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
