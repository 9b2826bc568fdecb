//! Minimal reverse-mode differentiation engine: flat f32 arrays, a per-batch
//! operation tape with custom-gradient hooks, and an Adam optimizer.

mod adam;
mod array;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use array::Array;
pub use tape::{rowwise_softmax, CustomVjp, Gradients, Tape, Var};

pub(crate) use array::matmul;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {context} at index {index}: {value}")]
    NonFinite {
        context: String,
        index: usize,
        value: f32,
    },
    #[error("loss must be a scalar, got {numel} elements")]
    NotScalar { numel: usize },
    #[error("custom gradient rule: {0}")]
    WrongGradShape(String),
    #[error("non-finite gradient for parameter `{param}` at index {index}: {value}")]
    NonFiniteGrad {
        param: String,
        index: usize,
        value: f32,
    },
    #[error("{0}")]
    InvalidArg(String),
}
