use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("class not registered: {0}")]
    UnknownClass(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("non-finite loss at epoch {epoch}, sample {sample}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        sample: String,
        detail: String,
    },

    #[error("malformed container {path}: {reason}")]
    Container { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Errors caused by the caller's input (configuration, files, data) as
    /// opposed to failures inside the pipeline.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Shape(_) | Error::Backend(_) | Error::NonFiniteLoss { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
