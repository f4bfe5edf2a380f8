//! Minimal rank-4 tensors with reverse-mode gradients.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{finite_diff_gradient, relative_error};
pub use graph::{sigmoid, softplus, Activation, Graph, Var};
pub use tensor::{Shape, Tensor};

#[cfg(test)]
mod tests;
