//! Multi-scale, domain-adversarial multiple-instance learning on a small
//! reverse-mode autodiff core.
//!
//! Everything numeric is generic over [`Scalar`]; training runs in `f32`
//! and gradient checks in `f64`. The aliases below name the common cases.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Gradients, Graph, OpKind, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
