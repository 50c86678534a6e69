use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("invalid optimizer state: {0}")]
    InvalidState(String),

    #[error("numerical divergence at epoch {epoch}, batch {batch}: loss is {value}")]
    NumericalDivergence { epoch: usize, batch: usize, value: f64 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// A malformed file: bad PGM/FTEN header, truncated payload, unparsable config.
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
