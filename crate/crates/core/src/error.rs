use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the benchmark pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("layout error: {0}")]
    Layout(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown backbone `{0}`")]
    Registry(String),
    #[error("LoRA injection error: {0}")]
    Injection(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode error at {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for scripted benchmarking: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Registry(_) | Error::Injection(_) | Error::Checkpoint(_) => 2,
            Error::Layout(_)
            | Error::Integrity(_)
            | Error::Split(_)
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Csv(_) => 3,
            Error::Numerical(_) => 4,
            Error::Shape(_) | Error::Tensor(_) | Error::Json(_) => 1,
        }
    }
}
