//! Dense f64 arrays with taped reverse-mode differentiation.
//!
//! [`Tensor`] is an immutable, row-major, contiguous block of 64-bit floats.
//! [`Tape`] records primitive operations in execution order; [`Tape::backward`]
//! replays the record once, in reverse, accumulating gradients in tape order so
//! results are bit-reproducible. [`gradcheck`] checks any taped computation
//! against central finite differences.
//!
//! Masking uses a large negative additive constant ([`MASK_NEG_INF`]) instead
//! of literal −∞ so that `softmax` never produces NaN from ∞−∞; entries at the
//! sentinel underflow to exactly zero after exponentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradCheckEntry, GradCheckReport};
pub use tape::{GradMap, Tape, Val};
pub use tensor::{Tensor, TensorId};

use thiserror::Error;

/// Additive mask sentinel standing in for −∞.
pub const MASK_NEG_INF: f64 = -1e30;

/// Errors from tensor construction and taped operations.
#[derive(Debug, Error)]
pub enum NumError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value produced (index {index})")]
    NonFinite { op: &'static str, index: usize },
    #[error("softmax: slice {slice} is fully masked")]
    DegenerateSoftmax { slice: usize },
    #[error("backward: loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: tape is empty")]
    EmptyTape,
    #[error("{op}: index {index} out of bounds for extent {extent}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("gradcheck: {0}")]
    GradCheck(String),
    #[error("gradcheck: function is non-deterministic ({0})")]
    Determinism(String),
}
