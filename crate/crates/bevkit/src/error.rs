//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by bevkit operations.
#[derive(Debug, Error)]
pub enum BevError {
    /// Tensor or matrix dimensions do not line up.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// A rotated box violates its invariants (non-positive size, non-finite field).
    #[error("invalid box: {reason}")]
    InvalidBox { reason: String },

    /// A polygon violates its invariants (too few vertices, not convex, not CCW).
    #[error("invalid polygon: {reason}")]
    InvalidPolygon { reason: String },

    /// NMS requires every detection to carry a score.
    #[error("detection {index} has no score")]
    MissingScore { index: usize },

    /// A numeric quantity that must be finite is NaN or infinite.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Configuration field rejected, with the offending field named.
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    /// Training or evaluation was asked to run on no data.
    #[error("empty dataset")]
    EmptyDataset,

    /// Malformed dataset or checkpoint content, with file context.
    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },

    /// Underlying I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl BevError {
    /// Attach a path to an I/O error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        BevError::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a path and reason to a parse failure.
    pub fn malformed(path: impl Into<String>, reason: impl Into<String>) -> Self {
        BevError::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, BevError>;
