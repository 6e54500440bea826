//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/shape mismatch; the message names both offending shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration (bad ranges, indivisible dimensions, unknown keys).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Coordinate text did not match the template. Carries the offending
    /// substring so the inference fallback policy can log it.
    #[error("parse error: {message} (offending text: {offending:?})")]
    Parse { message: String, offending: String },

    /// Loss requested over an all-zero supervision mask.
    #[error("empty supervision: loss mask selects no positions")]
    EmptySupervision,

    /// A gradient or loss went non-finite; names the parameter or batch.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Keypoint name not present in the registry.
    #[error("unknown keypoint {name:?} in category {category:?}; known: {candidates:?}")]
    UnknownKeypoint {
        name: String,
        category: String,
        candidates: Vec<String>,
    },

    /// Sequence exceeds the model context window.
    #[error("context overflow: sequence length {length} exceeds limit {limit}")]
    ContextOverflow { length: usize, limit: usize },

    /// Dataset file violates the documented schema; `path` is a JSON path.
    #[error("dataset schema violation at {path}: {message}")]
    Schema { path: String, message: String },

    /// A visible ground-truth keypoint has no matching prediction.
    #[error("missing prediction for keypoint {0:?}")]
    MissingPrediction(String),

    /// Checkpoint file malformed or version mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
