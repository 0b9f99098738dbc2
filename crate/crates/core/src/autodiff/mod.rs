//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.

mod adam;
mod gradcheck;
mod graph;
pub mod kernels;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{finite_diff_check, GradCheck};
pub use graph::{dropout_mask, Gradients, Graph, NodeId, NormMode, PROB_EPSILON};
pub use kernels::Padding;

#[cfg(test)]
mod tests;
