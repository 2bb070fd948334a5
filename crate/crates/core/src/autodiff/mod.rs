//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations on [`Tensor`](crate::tensor::Tensor)s as
//! they execute. Network parameters live in a [`ParamStore`]; binding one
//! into a graph makes it a differentiable leaf unless the store was frozen
//! on that graph. [`Graph::backward`] returns [`Gradients`] which can be
//! accumulated into stores or queried for differentiable inputs such as the
//! policy distribution parameters.

mod graph;
mod params;

pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS, LEAKY_SLOPE};
pub use params::{AdamConfig, ParamStore, MAGIC};

pub mod check;
