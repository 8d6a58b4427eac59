use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the sampling engine and the experiment harness.
#[derive(Debug, Error)]
pub enum ArtError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("quadrature did not converge after {panels} panels (estimate {estimate:e}, error {error:e})")]
    QuadratureNonConvergence {
        panels: usize,
        estimate: f64,
        error: f64,
    },

    #[error("all weights are zero or underflowed")]
    ZeroWeights,

    #[error("operation requires a {expected} problem")]
    WrongFlavor { expected: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ArtError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ArtError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, ArtError>;
