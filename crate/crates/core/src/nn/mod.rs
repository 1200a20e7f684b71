//! Minimal differentiable building blocks for the encoder towers.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::Adam;
pub use graph::{AttentionMask, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
