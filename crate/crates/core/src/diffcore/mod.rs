//! Differentiable-computation substrate: dense `B×C×L` tensors, an eager
//! reverse-mode tape over a small primitive set, and finite-difference
//! verification.

mod gradcheck;
mod graph;
pub mod kft;
mod params;
mod tensor;

pub use gradcheck::{evaluate, finite_difference_check, gradient, probe_seed, GraphBuilder};
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::silu;
pub use kft::KftArray;
pub use params::ParamStore;
pub use tensor::{Axis, Tensor3};
