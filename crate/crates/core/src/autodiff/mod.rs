//! Dense tensors, a dynamic reverse-mode tape and an SGD optimizer.
//!
//! Every forward pass records onto a fresh [`Tape`]. Parameters enter the
//! tape as leaves via [`Tape::leaf`]; after [`Tape::backward`] the returned
//! [`Gradients`] are written back into the parameter tensors and consumed by
//! [`Sgd::step`].

mod conv;
mod optim;
mod tape;
mod tensor;

pub use optim::{Sgd, SgdConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, found shape {found:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} has a zero-sized dimension")]
    ZeroDimension { shape: Vec<usize> },
    #[error("{op}: value {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("conv2d: kernel {kernel:?} larger than padded input {padded:?}")]
    KernelTooLarge {
        kernel: [usize; 2],
        padded: [usize; 2],
    },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("parameter {index} has no gradient")]
    MissingGradient { index: usize },
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
