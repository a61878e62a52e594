//! Small reverse-mode differentiation core over dense `f64` tensors.
//!
//! Only the primitives the training objective needs are provided. Gradients
//! through `max`/`min` go to the first attaining index.

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, grad_check_with, GradCheckReport};
pub use graph::{sigmoid, Gradients, Graph, Reduce, Var};
pub use tensor::{Tensor, NORM_EPS};
