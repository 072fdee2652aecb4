//! Dense row-major tensors and a Wengert-style tape for reverse-mode
//! differentiation.
//!
//! Parameters live in [`Tensor`]s (always `f32`). A training step binds them
//! onto a fresh [`Tape`], records the forward pass, and calls
//! [`Tape::backward`] on a scalar loss. The tape is generic over its element
//! type so the same forward code can be replayed in `f64` for gradient audits.

mod element;
pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use element::Element;
pub use tape::{AuditViolation, NodeTag, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}
