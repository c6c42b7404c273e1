use std::path::PathBuf;

use thiserror::Error;

use crate::feature::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid sample: {0}")]
    InvalidSample(Violation),

    #[error("samples not sorted by timestamp at index {index}")]
    Unsorted { index: usize },

    #[error("insufficient data to split")]
    InsufficientData,

    #[error("non-finite activation")]
    NonFiniteActivation,

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("no clicked samples")]
    NoClickedSamples,

    #[error("degenerate label set")]
    DegenerateLabels,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
