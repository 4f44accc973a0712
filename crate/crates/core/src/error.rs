use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate gaussian: {0}")]
    DegenerateGaussian(String),

    #[error("stale render state: {0}")]
    StaleState(String),

    #[error("plane fit failed: {0}")]
    FitFailure(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unsupported spherical-harmonic degree {0} (max 3)")]
    UnsupportedShDegree(usize),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("invalid synthetic scene spec: {0}")]
    InvalidSpec(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("frame mismatch: {0}")]
    FrameMismatch(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by input data (files, dimensions, schemas)
    /// rather than by numerics or programming mistakes.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format { .. }
                | Error::MissingFile(_)
                | Error::DimensionMismatch(_)
                | Error::FrameMismatch(_)
                | Error::InvalidSpec(_)
                | Error::FitFailure(_)
        )
    }
}
