//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("bad magic bytes in tensor file")]
    BadMagic,

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated tensor file: {0}")]
    Truncated(String),

    #[error("sequence too short to sample a clip")]
    SequenceTooShort,

    #[error("similarity margin undefined: mask holds a single class")]
    UndefinedMargin,

    #[error("training step aborted: {0}")]
    AbortStep(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
