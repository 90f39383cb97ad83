//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! The engine is deliberately small: a [`Graph`] records eagerly evaluated
//! operations and replays their vector-Jacobian products on
//! [`Graph::backward`]. Everything is generic over [`Element`] so the same
//! model code runs in `f32` for training and in `f64` for gradient checks.

pub mod conv;
pub mod graph;
pub mod numeric;
pub mod tensor;
pub mod warp;

pub use graph::{Gradients, Graph, Var};
pub use tensor::{gemm, Element, Tensor};
