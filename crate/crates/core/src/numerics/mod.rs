//! Dense 64-bit tensors with reverse-mode automatic differentiation.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;

pub use gradcheck::{check_gradient, GradCheck};
pub use graph::{Graph, SpatialDims, Var};
pub use optim::Adam;
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use rng::Sampler;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
