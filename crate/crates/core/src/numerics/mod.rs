//! Minimal reverse-mode differentiable arrays.
//!
//! [`Graph`] records primitives eagerly and replays them backwards; every
//! feature map, logit and loss in the crate is a node of one of these graphs.
//! [`finite_difference_check`] is the independent oracle for the analytic
//! gradients.

mod array;
mod gradcheck;
mod graph;

pub use array::DiffArray;
pub use gradcheck::{finite_difference_check, FiniteDifferenceReport};
pub use graph::{Graph, NodeId, Op, LAYER_NORM_EPS};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node}: softmax over an empty axis")]
    EmptySoftmax { node: usize },
    #[error("backward needs a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("node {0} does not exist yet")]
    UnknownNode(usize),
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("function is not finite at probe coordinate {coordinate}")]
    NonFinite { coordinate: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}
