use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("objective is not a scalar: shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("quaternion is not unit norm (|r| = {0})")]
    NonUnitQuaternion(f64),

    #[error("label list is empty")]
    EmptyLabels,

    #[error("no grasps predicted")]
    NoGraspsPredicted,

    #[error("no objects in scene")]
    NoObjects,

    #[error("format mismatch: {0}")]
    FormatMismatch(String),

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("generation failed for seed {seed}: {reason}")]
    GenerationFailed { seed: u64, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Attaches `path` to an I/O failure.
pub fn at_path(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::File { path: path.to_owned(), source }
}

impl Error {
    /// Format/data problems, as opposed to numerical or usage failures.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::FormatMismatch(_)
                | Error::TruncatedPayload(_)
                | Error::SizeMismatch(_)
                | Error::Dataset(_)
                | Error::Io(_)
                | Error::File { .. }
                | Error::GenerationFailed { .. }
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
