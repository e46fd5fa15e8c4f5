//! Error type shared across the toolkit.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dataset entry missing: {path}")]
    MissingEntry { path: PathBuf },

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error("training aborted at step {step}: {reason}")]
    NumericAbort { step: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: input and usage problems map to 2,
    /// checkpoint compatibility to 3, numeric failure during training
    /// to 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Incompatible(_) => 3,
            Error::NumericAbort { .. } => 4,
            _ => 2,
        }
    }
}
