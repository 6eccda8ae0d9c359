//! Minimal reverse-mode automatic differentiation over dense 2-D `f64` tensors.
//!
//! A [`Graph`] records every operation in construction order; [`Graph::backward`]
//! walks the tape in reverse and returns a [`Gradients`] table. Only matrices are
//! supported: sequences are rows, features are columns.

mod graph;
mod tensor;

pub use graph::{log_softmax_rows, Gradients, Graph, Mode, Var};
pub use tensor::{log_sum_exp, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("dimension mismatch in {op}: {}x{} vs {}x{}", lhs.0, lhs.1, rhs.0, rhs.1)]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be 1x1, got {}x{}", shape.0, shape.1)]
    NonScalarLoss { shape: (usize, usize) },
    #[error("index out of range: {0}")]
    Range(String),
    #[error("{0}")]
    Contract(String),
}
