use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents that do not line up for an operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Invalid model, block or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite or otherwise unusable numbers.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Corrupt or truncated container / checkpoint data.
    #[error("integrity error ({tensor}): {detail}")]
    Integrity { tensor: String, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn integrity(tensor: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Integrity {
            tensor: tensor.into(),
            detail: detail.into(),
        }
    }
}
