use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image shapes that cannot be combined.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value outside its documented domain.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("failed to ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    /// A non-finite loss; training stops rather than continuing on garbage.
    #[error("training aborted at epoch {epoch}, step {step}: {component} loss is not finite")]
    NonFiniteLoss {
        component: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("missing artifact {path}: run {stage} first")]
    MissingArtifact { stage: &'static str, path: PathBuf },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error families, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Training,
    Other,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::MissingArtifact { .. } => ErrorCategory::Config,
            Error::Ingestion { .. } | Error::Validation(_) | Error::Dimension(_) => {
                ErrorCategory::Data
            }
            Error::NonFiniteLoss { .. } | Error::Tensor(_) | Error::Checkpoint { .. } => {
                ErrorCategory::Training
            }
            Error::Io(_) | Error::Json(_) => ErrorCategory::Other,
        }
    }
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
