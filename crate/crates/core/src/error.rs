use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor extents.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: String, detail: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: String, detail: String },

    /// Invalid hyperparameters or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("failed to ingest {path}: {detail}")]
    Ingestion { path: PathBuf, detail: String },

    #[error("checkpoint decode error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
