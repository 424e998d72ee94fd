//! Crate-wide error type. Invalid numerical input is rejected eagerly (at type
//! construction or operation entry) rather than propagated as NaN.

/// Convenience result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A vector or matrix had a different dimension than the operation expects.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// An input contained NaN or an infinity.
    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    /// An index (code, stage, or token) was outside its valid range.
    #[error("{context}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        len: usize,
    },

    /// A scalar parameter was outside its documented range.
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// The operation needs more data than was supplied (e.g. k-means with
    /// fewer points than clusters).
    #[error("insufficient data for {context}: need at least {needed}, got {got}")]
    InsufficientData {
        context: &'static str,
        needed: usize,
        got: usize,
    },

    /// Structurally valid input on which the operation is mathematically
    /// undefined (all-zero totals, empty masks, zero-norm vectors, ...).
    #[error("degenerate input for {context}: {reason}")]
    DegenerateInput { context: &'static str, reason: String },

    /// A tracked analytic bound was exceeded during training; indicates
    /// numerical divergence rather than bad input.
    #[error("bound violated at step {step}: {detail}")]
    BoundViolation { step: u64, detail: String },
}
