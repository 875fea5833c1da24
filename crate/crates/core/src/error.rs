use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header in {path}: {message}")]
    MalformedHeader { path: PathBuf, message: String },
    #[error("unsupported element type {0:?} (only \"f32\" is supported)")]
    UnsupportedType(String),
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("shape {0:?} is not representable")]
    BadShape(Vec<usize>),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("duplicate subject id {0:?}")]
    DuplicateId(String),
    #[error("record {line}: missing field {field}")]
    MissingField { line: usize, field: &'static str },
    #[error("record {line}: unknown split {split:?}")]
    UnknownSplit { line: usize, split: String },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty selection: {0}")]
    EmptySelection(String),
    #[error("not enough data: {0}")]
    NotEnoughData(String),
    #[error("diverged at iteration {iteration}: {message}")]
    Diverged { iteration: usize, message: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("plot error: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
