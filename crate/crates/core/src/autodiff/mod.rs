//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! replays it in reverse once and returns [`Gradients`]. Trainable tensors live
//! in a [`ParamStore`] and enter a graph through [`Graph::param`], which lets
//! the store pick up their gradients afterwards with
//! [`ParamStore::accumulate`]. [`Adam`] consumes those gradients.
//!
//! The operation set is deliberately small: exactly what a causal Transformer
//! encoder and the recommendation losses need.

mod adam;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{softmax_rows, Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
