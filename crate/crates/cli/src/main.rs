//! `pseudoflow` — train, sample and evaluate flow-based generative
//! pseudoinverses from the command line.
//!
//! Exit codes: 0 on success, 1 for usage, configuration and I/O errors,
//! 2 for numeric failures (divergence, non-finite values, rank
//! deficiency).
//!
//! Environment: `PSEUDOFLOW_OUT_DIR` overrides the config's output
//! directory when `--out` is not given; `PSEUDOFLOW_THREADS` caps the
//! worker threads used by `sample` and `eval`.

mod commands;
mod imageio;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn user(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<pseudoflow::Error> for CliError {
    fn from(e: pseudoflow::Error) -> Self {
        CliError {
            code: if e.is_numeric() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::user(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match commands::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
