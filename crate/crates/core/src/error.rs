use std::path::PathBuf;

/// Errors raised anywhere in the forecasting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to ingest {}: {reason}", file.display())]
    Ingestion { file: PathBuf, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty selection: {0}")]
    Empty(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn ingestion(file: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Ingestion {
            file: file.into(),
            reason: reason.into(),
        }
    }
}
