use std::path::PathBuf;

use crate::generator::format::WeightFileError;

/// Errors raised by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor or lattice dimensions.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument or configuration value is out of its documented range.
    #[error("validation error: {0}")]
    Validation(String),

    /// The object is not in the state the operation requires.
    #[error("state error: {0}")]
    State(String),

    /// A NaN or infinity appeared in a value or gradient.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Unsupported image format or pixel layout.
    #[error("image format error: {0}")]
    Format(String),

    #[error(transparent)]
    WeightFile(#[from] WeightFileError),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
