//! Deterministic dense-matrix kernels, a small recorded-graph autodiff over
//! exactly those kernels, AdamW and the warmup/cosine schedule.

pub mod block;
pub mod gradcheck;
mod graph;
mod matrix;
pub mod ops;
mod optim;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use matrix::Matrix;
pub use ops::{attention, layer_norm, linear, matmul, softmax_rows};
pub use optim::{adamw_step, cosine_warmup_lr, OptimHyper};
pub use params::{ParamEntry, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("matrix must have at least one row and column, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("data length {got} does not match shape ({expected} expected)")]
    DataLength { expected: usize, got: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("backward called without a recorded forward pass for this value")]
    MissingForwardState,
    #[error("schedule step {step} beyond total {total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("invalid optimizer hyper-parameters: {0}")]
    BadHyper(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter {0} registered twice")]
    DuplicateParam(String),
}
