use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid span (center {center}, width {width}): {reason}")]
    InvalidSpan {
        center: f64,
        width: f64,
        reason: &'static str,
    },

    #[error("cost matrix entry ({row}, {col}) is not finite")]
    InvalidCost { row: usize, col: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("feature row {row} has zero norm")]
    DegenerateFeature { row: usize },

    #[error("sequence of length {len} is shorter than the {min}-frame kernel window")]
    SequenceTooShort { len: usize, min: usize },

    #[error("{path}: bad magic, not an EATF feature file")]
    BadMagic { path: PathBuf },

    #[error("{path}: expected {expected} payload bytes, found {found}")]
    Length {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: field `{field}`: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("sample `{vid}`: {message}")]
    Validation { vid: String, message: String },

    #[error("sample `{vid}`: missing feature file {path}")]
    MissingFeature { vid: String, path: PathBuf },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint format version {found} is incompatible with version {expected}")]
    IncompatibleVersion { found: u32, expected: u32 },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
