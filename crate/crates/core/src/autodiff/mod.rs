//! Dense tensors with a reverse-mode differentiation tape.

mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

use thiserror::Error;

pub use gradcheck::grad_check;
pub use graph::{CustomBackward, Graph, Var};
pub use kernels::logsumexp;
pub use params::{ParamId, ParamStore, PARAM_MAGIC};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}
