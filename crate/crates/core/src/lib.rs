//! Gradient-ascent machine unlearning for small autoregressive language models.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod objectives;
pub mod optimizer;
pub mod tensor;
pub mod unlearner;

pub use autodiff::{grad_check, Graph, ScalarFn, Var};
pub use error::{Error, ErrorKind, Result};
pub use tensor::{Scalar, Tensor};
