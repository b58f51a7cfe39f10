//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation applied to its nodes; calling
//! [`Graph::backward`] on a scalar node sweeps the tape in reverse and
//! accumulates gradients into the leaves created with `requires_grad`.
//!
//! ```
//! use riblab::gradcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = g.sum_squares(x).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod check;
mod conv;
mod graph;
mod tensor;

pub use check::{
    grad_check, relative_error, CoordinateCheck, GradCheckOptions, GradCheckReport, REL_ERROR_FLOOR,
};
pub use graph::{gndrp_selection, Activation, Graph, Pooled, ProbKind, Var, PROB_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
