//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A computation produced or received NaN/Inf.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A vector that must be normalized has norm at or below the cutoff.
    /// `index` identifies the offending row/slot when the caller works on a
    /// batch, and is 0 for standalone vectors.
    #[error("degenerate vector at index {index} (norm {norm:.3e} <= eps {eps:.3e})")]
    DegenerateVector { index: usize, norm: f64, eps: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),

    /// Per-image centering removed every slot (all rows equal the mean).
    #[error("centering left no usable slots")]
    EmptyAfterCentering,

    #[error("hungarian coupling requires a square cost matrix, got {rows}x{cols}")]
    NonSquareCost { rows: usize, cols: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("class {0} missing from support set")]
    MissingClass(usize),

    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
