use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report, grouped by category.
#[derive(Debug, Error)]
pub enum CampError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("degenerate softmax row {row}: every position is masked")]
    DegenerateRow { row: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("autodiff error: {0}")]
    Tape(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("version mismatch in {path}: expected {expected}, found {found}")]
    Version { path: PathBuf, expected: u16, found: u16 },
    #[error("truncated payload in {path}: need {needed} bytes, found {available}")]
    Truncated { path: PathBuf, needed: u64, available: u64 },
    #[error("non-finite value in {path} at element {index}")]
    NonFinite { path: PathBuf, index: usize },
    #[error("checkpoint tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CampError {
    /// Short category tag used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            CampError::Shape { .. } | CampError::InvalidShape(_) | CampError::CheckpointShape { .. } => "shape",
            CampError::DegenerateRow { .. } | CampError::Domain(_) => "domain",
            CampError::Config(_) | CampError::TokenOutOfVocab { .. } => "config",
            CampError::Tape(_) | CampError::MissingGrad(_) => "autodiff",
            CampError::Format { .. }
            | CampError::Version { .. }
            | CampError::Truncated { .. }
            | CampError::NonFinite { .. } => "format",
            CampError::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CampError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CampError>;
