//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by tensor math, model assembly, training, and the data
/// pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not compose for the attempted operation.
    #[error("dimension mismatch in {op}: lhs shape {lhs:?}, rhs shape {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A NaN/Inf surfaced where finite values are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Invalid configuration value or combination.
    #[error("invalid config: {0}")]
    Config(String),

    /// An index (token id, layer, target) is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Sequence exceeds the model's maximum length.
    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    /// A line-delimited input file failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Structurally valid input that violates a data invariant.
    #[error("invalid input: {0}")]
    Input(String),

    /// Malformed or incompatible checkpoint container.
    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
