//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters live in a
//! [`ParamSet`] outside the graph; [`Graph::bind`] copies them in as leaves
//! and [`Graph::backward_into`] accumulates gradients back onto them.

mod error;
pub mod gradcheck;
mod graph;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Bound, Gradients, Graph, Var};
pub use tensor::{ParamId, ParamSet, Tensor};
