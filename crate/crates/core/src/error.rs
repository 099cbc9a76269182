use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("image file not found: {}", .0.display())]
    MissingImage(PathBuf),

    #[error("transcriptions use symbols outside the charset: {0}")]
    Validation(crate::data::ValidationReport),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("training diverged at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 usage/config/input, 3 state/compatibility,
    /// 4 runtime divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Incompatible(_) => 3,
            Error::Divergence { .. } => 4,
            _ => 2,
        }
    }
}
