use std::path::PathBuf;

use par_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl ParError {
    pub fn contract(msg: impl Into<String>) -> Self {
        ParError::Contract(msg.into())
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        ParError::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ParError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        ParError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for NaN/Inf failures, whichever layer raised them.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ParError::Numeric(_)
                | ParError::Tensor(TensorError::NonFinite { .. })
                | ParError::Tensor(TensorError::NonFiniteGrad { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, ParError>;
