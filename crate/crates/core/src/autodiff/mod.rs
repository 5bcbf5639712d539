//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Storage is row-major. Broadcasting is limited to single-element operands.
//! Norm and mean reductions accumulate in `f64`.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamGradError};
pub use params::{BoundParams, ParameterStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};

use std::sync::atomic::{AtomicBool, Ordering};

static STRICT_DEFAULT: AtomicBool = AtomicBool::new(false);

/// Make tapes created with [`Tape::new`] reject non-finite values.
pub fn set_strict_default(strict: bool) {
    STRICT_DEFAULT.store(strict, Ordering::Relaxed);
}

pub fn strict_default() -> bool {
    STRICT_DEFAULT.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("missing parameter {name:?}")]
    MissingParam { name: String },
    #[error("duplicate parameter {name:?}")]
    DuplicateParam { name: String },
    #[error("function is not deterministic: {first} != {second}")]
    Nondeterministic { first: f64, second: f64 },
    #[error("{what}")]
    InvalidArgument { what: String },
}
