use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("scoring failed: {message} (raw output: {raw:?})")]
    Scoring { message: String, raw: String },

    #[error("corrupt reward snapshot at {}: {reason}", file.display())]
    CorruptSnapshot { file: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error at epoch {epoch}, step {step}: {source}")]
    Step {
        epoch: usize,
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("stage error: {0}")]
    Stage(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(left: impl std::fmt::Debug, right: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            left: format!("{left:?}"),
            right: format!("{right:?}"),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::InvalidImage(_) | Error::Codec(_) => 3,
            Error::Step { source, .. } => match source.as_ref() {
                Error::Config(_) => 2,
                _ => 4,
            },
            _ => 4,
        }
    }
}
