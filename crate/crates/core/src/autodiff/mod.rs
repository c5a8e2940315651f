//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive applications in execution order; a reverse
//! sweep from a scalar loss yields [`Gradients`] for every leaf that tracks
//! them. Convolutions are cross-correlations with symmetric zero padding, and
//! `deconv2d` is the exact adjoint of `conv2d`.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use tape::{Attrs, Gradients, Primitive, Tape, Var, CATALOG, LAYER_NORM_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{primitive}: shape mismatch: {detail}")]
    ShapeMismatch {
        primitive: &'static str,
        detail: String,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("unknown primitive `{0}` (catalog: {})", CATALOG.join(", "))]
    UnknownPrimitive(String),
    #[error("{primitive}: missing attribute `{attr}`")]
    MissingAttribute { primitive: String, attr: &'static str },
    #[error("{primitive}: expected {expected} inputs, got {found}")]
    Arity {
        primitive: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss was not produced by this tape")]
    DetachedLoss,
    #[error("variable belongs to a different tape")]
    ForeignVariable,
    #[error("finite-difference step {0} outside (0, 1e-2]")]
    InvalidStep(f64),
    #[error("{primitive} turned finite inputs into non-finite values (tape node {node})")]
    NonFiniteOutput { primitive: &'static str, node: usize },
    #[error("failed to decode tensor: {0}")]
    Decode(String),
}
