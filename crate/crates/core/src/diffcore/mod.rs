//! Minimal reverse-mode differentiation over dense row-major tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node sweeps the tape in reverse and
//! returns gradients for every trainable leaf. Only the primitives the
//! transformer needs are provided.

mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Var, RMS_EPS};
pub use scalar::Scalar;
pub use tensor::Tensor;
