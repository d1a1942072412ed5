//! Differentiable numeric kernel: tensors, a recording tape with reverse-mode
//! gradients, a finite-difference checker and the Adam optimizer.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use optim::{optimizer_step, Adam, OptimConfig, Schedule};
pub use params::{Param, ParamStore, CHECKPOINT_VERSION};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{kind}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        kind: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{kind}: expected {expected} inputs, got {got}")]
    Arity {
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("buffer of length {len} does not fit shape {shape:?}")]
    BufferLength { shape: Vec<usize>, len: usize },
    #[error("{kind}: non-finite value")]
    NonFinite { kind: &'static str },
    #[error("{kind}: zero-norm input")]
    ZeroNorm { kind: &'static str },
    #[error("{kind}: {reason}")]
    Domain { kind: &'static str, reason: String },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already run on this recording; run a new forward first")]
    BackwardTwice,
    #[error("loss function is not deterministic ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
    #[error("NaN gradient for parameter `{0}`")]
    NanGradient(String),
    #[error("no gradient supplied for trainable parameter `{0}`")]
    MissingGradient(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
