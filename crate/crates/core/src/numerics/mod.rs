//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference oracle.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{entry_error, finite_difference_gradient, numeric_gradient, GradReport, ParamGradCheck, ABS_FLOOR};
pub use graph::{forward_backward, sigmoid, Gradients, Graph, Var};
pub use params::ParamSet;
pub use tensor::Tensor;
