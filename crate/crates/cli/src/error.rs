use std::path::PathBuf;

use fbsde_core::Error as SolverError;
use thiserror::Error;

/// Failures of a CLI invocation, grouped by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// The config could not be read, parsed or validated.
    #[error("invalid config: {0}")]
    Validation(String),

    /// The solver gave up; a partial report has been written.
    #[error("{0}")]
    NotConverged(String),

    /// At least one suite criterion failed.
    #[error("{0}")]
    SuiteFailed(String),

    /// Anything else, including output failures.
    #[error("{0}")]
    Failure(String),

    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::SuiteFailed(_) | CliError::Failure(_) | CliError::Io { .. } => 1,
        }
    }

    /// Validation error for the config entry at `path`.
    pub fn at(path: &str, message: impl std::fmt::Display) -> Self {
        CliError::Validation(format!("{path}: {message}"))
    }
}

impl From<SolverError> for CliError {
    fn from(error: SolverError) -> Self {
        match error {
            SolverError::Topology(_) | SolverError::Shape(_) | SolverError::Usage(_) | SolverError::InvalidData(_) => {
                CliError::Validation(error.to_string())
            }
            SolverError::Convergence { .. } | SolverError::Resource(_) => CliError::NotConverged(error.to_string()),
            _ => CliError::Failure(error.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
