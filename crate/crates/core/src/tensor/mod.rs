//! Dense tensors, numeric kernels and the autograd tape.

mod graph;
pub mod kernels;

pub use graph::{Gradients, Graph, NormObservation, Var};
pub use kernels::ConvGeometry;
