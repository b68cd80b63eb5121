//! Minimal dense-tensor core with tape-based reverse-mode differentiation.
//!
//! Values are `f64` throughout. A [`Graph`] records forward ops over
//! [`Tensor`] values and parameters borrowed from a [`ParamStore`];
//! [`Graph::backward`] returns [`Gradients`] for every parameter and
//! gradient-tracking input that contributed to the loss.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{log_sum_exp, Gradients, Graph, Mode, Precision, Var, NORM_EPS};
pub use params::{normal_tensor, uniform_tensor, ParamId, ParamStore};
pub use tensor::Tensor;
