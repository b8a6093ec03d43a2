//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! then walks the nodes in reverse creation order. Parameters live in a
//! [`ParamSet`] and are bound to a fresh graph for every forward pass.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{finite_diff_check, GradReport, GRAD_CHECK_FLOOR};
pub use graph::{softmax_in_place, CustomBackward, Gradients, Graph, Var, CONTEXT_NORM_EPS};
pub use params::{ParamSet, ParamVars};
pub use tensor::{Tensor, MAX_AXES};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("backward needs a scalar root, got dims {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("loss evaluated to a non-finite value ({0})")]
    NonFiniteLoss(f64),
    #[error("invalid shape: {0}")]
    BadShape(String),
}
