use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input whose shape or range does not fit the configured model.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("optimizer state does not match parameter layout: {0}")]
    OptimizerMismatch(String),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (answer loss {answer_loss}, locator loss {locator_loss:?})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        answer_loss: f64,
        locator_loss: Option<f64>,
    },

    #[error("{path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
