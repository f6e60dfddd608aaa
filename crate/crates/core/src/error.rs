//! Error type shared across the crate.
//!
//! The variants map onto the CLI exit codes: validation failures exit 2,
//! missing dependency artifacts exit 3, numerical failures exit 4.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad input: dimension mismatches, out-of-range values, malformed config.
    #[error("validation: {0}")]
    Validation(String),

    /// A required artifact (checkpoint, file, prior stage output) is missing.
    #[error("dependency: {0}")]
    Dependency(String),

    /// Optimization diverged or produced non-finite values.
    #[error("numerical: {0}")]
    Numerical(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image: {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    /// Exit code for the CLI: 2 validation, 3 dependency, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dependency(_) => 3,
            Error::Numerical(_) => 4,
            _ => 2,
        }
    }
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
