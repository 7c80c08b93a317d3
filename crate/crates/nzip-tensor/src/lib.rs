//! Reverse-mode autodiff on dense f64 tensors.
//!
//! The engine is deliberately small: tensors are immutable reference-counted
//! nodes, each non-leaf carries a closure that maps the output gradient to
//! parent gradients, and [`Tensor::backward`] walks the graph once in reverse
//! topological order. Only leaves retain gradients between calls; interior
//! gradients live in a scratch table owned by the traversal.
//!
//! Downstream crates register fused ops (normalization, rate terms) through
//! [`Tensor::from_op`] without touching engine internals.

mod conv;
mod error;
mod gradcheck;
mod norm;
mod ops;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{assert_grads_match, gradcheck, GRADCHECK_EPS, GRADCHECK_TOL};
pub use ops::Activation;
pub use tensor::{no_grad, BackwardFn, GradSink, Tensor};
