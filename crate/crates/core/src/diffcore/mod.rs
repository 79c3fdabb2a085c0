//! Dense tensors with a reverse-mode tape and a central-difference checker.

pub mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use gradcheck::{check_fn, finite_diff_check, standard_cases, GradCheck};
pub use graph::{op_set, Gradients, Graph, Var, LAYER_NORM_EPS, LOG_FLOOR, OP_SET};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown op `{0}`")]
    UnknownOp(String),
}

#[cfg(test)]
mod tests;
