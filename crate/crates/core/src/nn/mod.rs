//! Minimal tape-based autodiff and the layers built on it.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{AttnLayout, Graph, Var};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Tensor;
