//! Dense tensors and a reverse-mode autodiff tape.

mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use gradcheck::{
    grad_check, relative_error, GradCheckOptions, GradCheckReport, RELATIVE_FLOOR,
};
pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
