use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, schedule, or run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    /// A NaN or infinity appeared where a finite value is required.
    #[error("numeric failure: {0}")]
    NonFinite(String),

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("request error: {0}")]
    Request(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
