//! Error type shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed input file; carries the position where parsing failed.
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Input violated a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Matrix dimensions do not chain.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A forward or backward pass produced NaN/Inf.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// Training loss became non-finite and could not recover.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Checkpoint/artifact headers do not describe the same preprocessing run.
    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 parse, 3 validation, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Io { .. } => 2,
            Error::Validation(_)
            | Error::Shape(_)
            | Error::NonFinite(_)
            | Error::Provenance(_) => 3,
            Error::Divergence(_) => 4,
        }
    }
}
