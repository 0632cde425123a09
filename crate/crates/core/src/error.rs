use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("singular variance at index {index}")]
    Singular { index: usize },

    #[error("no monotonic alignment of {frames} frames onto {phonemes} phonemes")]
    Infeasible { frames: usize, phonemes: usize },

    #[error("instance too large: {count} candidates exceeds limit {limit}")]
    TooLarge { count: u128, limit: u128 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unknown {kind} id {id} (table size {size})")]
    UnknownId {
        kind: &'static str,
        id: usize,
        size: usize,
    },

    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
