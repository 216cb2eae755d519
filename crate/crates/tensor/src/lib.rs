//! Dense tensors, a reverse-mode autodiff tape, and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`]; each forward pass records onto a
//! fresh [`Graph`], and [`Graph::backward`] accumulates gradients back into
//! the store. Gradients accumulate across backward calls until
//! [`ParamStore::zero_grad`].

mod error;
mod float;
pub mod gradcheck;
mod graph;
mod optim;
mod param;
mod tensor;

pub use error::{Result, TensorError};
pub use float::{gemm, Float};
pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, grad_norm, AdamConfig, AdamState};
pub use param::{truncated_normal, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
