//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough state to run its exact backward rule. Nodes are created in
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//!
//! The op set is deliberately small (it covers what a Unet with attention
//! needs) and every op is checked against central differences by
//! [`gradcheck`].

mod error;
mod graph;
mod kernels;
mod real;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;

pub use error::{AutodiffError, Result};
pub use graph::{Graph, LinearMap, Var};
pub use real::Real;
pub use tensor::Tensor;
