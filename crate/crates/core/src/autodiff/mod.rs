//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Conventions:
//! - `conv2d` is cross-correlation (the kernel is not flipped).
//! - `clamp` passes gradient 1 inside and exactly on its bounds, 0 strictly outside.
//! - Elementwise binary ops only broadcast a one-element operand against a tensor.

mod kernels;
mod tape;
mod tensor;

pub use tape::{SparseMap, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}")]
    BadShape(Vec<usize>),
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("kernel of size {kernel} exceeds padded input extent {padded}")]
    KernelTooLarge { kernel: usize, padded: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("variable {0} is not on this tape")]
    UnknownVar(usize),
    #[error("{0}")]
    InvalidArgument(&'static str),
}

#[cfg(test)]
mod tests;
