//! Minimal reverse-mode numeric engine: dense `f64` tensors, a define-by-run
//! tape, named parameter storage and a finite-difference gradient oracle.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, ParamCheck};
pub use params::{Bound, GradBuffer, ParamStore};
pub use tape::{Gradients, Tape, Var, LOG_EPS};
pub use tensor::Tensor;

pub(crate) use tape::softplus;
pub(crate) use tensor::{dot, sigmoid};
