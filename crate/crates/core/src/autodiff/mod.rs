//! Minimal reverse-mode differentiable tensor core.

pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var, BN_EPS, LN_EPS, NORM_EPS};
pub use params::{BnUpdate, ParamId, ParamKind, ParamStore, Parameter};
pub use tensor::{Scalar, Tensor};
