use std::path::PathBuf;

use myopia_nn::NnError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad arguments or configuration.
    Usage,
    /// Input data failed validation.
    Data,
    /// A computation produced NaN/Inf or diverged.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain: {0}")]
    Domain(String),

    #[error("image: {0}")]
    Image(String),

    #[error("cohort: {0}")]
    Cohort(String),

    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("model: {0}")]
    Model(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("eval: {0}")]
    Eval(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    Divergence {
        epoch: usize,
        batch: usize,
        source: NnError,
    },

    #[error(transparent)]
    Nn(#[from] NnError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("png: {0}")]
    Png(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::Divergence { .. } => ErrorClass::Numerical,
            Error::Nn(NnError::NonFinite { .. }) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
