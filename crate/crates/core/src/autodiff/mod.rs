//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value, and
//! [`Graph::backward`] walks the tape once in reverse. Graphs own no shared
//! state, so independent graphs can be built and differentiated on
//! different threads.

mod gradcheck;
mod graph;
pub mod snapshot;
mod tensor;

pub use gradcheck::{grad_check, grad_check_multi, GradCheckReport};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

pub(crate) use graph::{matmul_raw, sigmoid, softmax_in_place};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected rank {expected}, got {got}")]
    RankMismatch { op: &'static str, expected: usize, got: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },
    #[error("slice [{start}, {start}+{len}) exceeds dimension {dim}")]
    SliceOutOfRange { start: usize, len: usize, dim: usize },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must be scalar, got shape {shape:?}")]
    NotScalarRoot { shape: Vec<usize> },
    #[error("masked softmax row has no admissible entries")]
    EmptySoftmaxRow,
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("snapshot: {0}")]
    Snapshot(String),
}
