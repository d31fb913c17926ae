//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied to its variables. Calling
//! [`Graph::backward`] on a scalar walks the tape once in reverse and returns
//! a gradient for each trainable leaf. Graphs are cheap and meant to be
//! rebuilt for every loss evaluation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, gradient};
pub use graph::{Gradients, Graph, ParamId, Primitive, Var};
pub use tensor::Tensor;
