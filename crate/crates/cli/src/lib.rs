//! Data plumbing and subcommands behind the `mplnfa` binary.
//!
//! * [`io`]: count-matrix ingestion, normalization factors and CSV writers.
//! * [`params`]: JSON form of mixture parameters.
//! * [`report`]: the fit report.
//! * [`commands`]: `fit`, `simulate` and `evaluate`.
//! * [`app`]: argument parsing and dispatch.

pub mod app;
pub mod commands;
pub mod io;
pub mod params;
pub mod report;

use thiserror::Error;

/// Failure of a CLI command, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input or flags; exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while computing or writing results; exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<mplnfa::Error> for CliError {
    fn from(e: mplnfa::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

pub(crate) fn runtime(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{context}: {e}"))
}

pub type CliResult<T> = std::result::Result<T, CliError>;
