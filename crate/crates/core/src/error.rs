use std::path::PathBuf;

use him_autograd::AutogradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HimError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {malformed} of {total} records malformed (limit 10%)")]
    TooManyMalformed {
        path: PathBuf,
        malformed: usize,
        total: usize,
    },
    #[error("record {index} has no rating")]
    MissingRating { index: usize },
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("{0}")]
    Format(String),
}

pub type Result<T, E = HimError> = std::result::Result<T, E>;

pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> HimError {
    HimError::Invalid {
        what,
        reason: reason.into(),
    }
}

impl From<csv::Error> for HimError {
    fn from(e: csv::Error) -> Self {
        HimError::Format(e.to_string())
    }
}

impl From<serde_json::Error> for HimError {
    fn from(e: serde_json::Error) -> Self {
        HimError::Format(e.to_string())
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HimError {
    let path = path.into();
    move |source| HimError::Io { path, source }
}
