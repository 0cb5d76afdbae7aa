//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by parsing, featurization, training, and search.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input data (bad JSON, bad record fields).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A primitive type mnemonic that the registry does not know.
    #[error("unknown primitive type `{0}`")]
    UnknownType(String),

    /// A semantically invalid value (non-positive latency, empty sequence, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Inconsistent or unusable configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Numeric failure during training or evaluation (NaN loss, overflow).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A checkpoint that fails digest or structural verification.
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
