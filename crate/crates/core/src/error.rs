use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A corpus file could not be parsed.
    #[error("{file}:{line}: {message}")]
    Ingest {
        file: PathBuf,
        line: u64,
        message: String,
    },

    /// Inputs are well-formed but violate a domain invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Binary container problems: bad magic, version, checksum, truncation.
    #[error("format error: {0}")]
    Format(String),

    /// Failures during training or retrieval (non-finite loss, exhausted
    /// sampling, scorer failures).
    #[error("runtime error: {0}")]
    Runtime(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the CLI: 2 for bad inputs, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Ingest { .. }
            | Error::Validation(_)
            | Error::DimensionMismatch { .. }
            | Error::InvalidArgument(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
