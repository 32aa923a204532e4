//! Differentiable-computation substrate: dense tensors, a tape-based
//! reverse-mode graph, and named parameter storage.

pub mod graph;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{Bound, Params};
pub use tensor::{Real, Tensor};
