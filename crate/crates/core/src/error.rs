use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller supplied an argument outside an operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// An internal precondition between components was violated
    /// (unnormalized embeddings, stale tape, shape drift).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroRow { row: usize },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
