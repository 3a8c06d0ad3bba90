use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, extents or directions that do not fit together.
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A transport or service failure from an LLM backend.
    #[error("backend error ({backend}): {message}")]
    Backend {
        backend: String,
        message: String,
        retryable: bool,
    },

    /// The backend answered, but not with something usable.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("training diverged at step {step} (record {record}): loss = {loss}")]
    Training { step: u64, record: String, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Backend { retryable: true, .. })
    }

    /// Process exit code: 2 for bad input or configuration, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Config(_) | Error::Geometry(_) => 2,
            _ => 1,
        }
    }
}
