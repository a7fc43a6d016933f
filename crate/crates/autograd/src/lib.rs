//! Minimal reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! The op set is exactly what the super-resolution models and distillation
//! losses need: convolutions, pixel shuffle, dense-block concatenation,
//! channel softmax, Haar analysis, Gram matrices and spectral weight
//! normalization. All kernels are single-threaded and deterministic.

mod graph;
pub mod gradcheck;
pub mod ops;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use real::{matmul, Real};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutogradError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("{0}")]
    Callback(String),
}

pub type Result<T, E = AutogradError> = std::result::Result<T, E>;
