//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The tape records every op with its forward value; [`Tape::backward`] walks
//! the record once in reverse. Only the ops the micro transformer and the
//! training objectives need are provided.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TapeError {
    #[error("data length {len} does not match shape {shape:?}")]
    Length { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range (bound {bound})")]
    Index { index: usize, bound: usize },
    #[error("{op}: input outside the domain at flat index {index}")]
    Domain { op: &'static str, index: usize },
    #[error("{op}: no inputs")]
    Empty { op: &'static str },
    #[error("invalid parameter {name} = {value}")]
    Parameter { name: &'static str, value: f64 },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
}
