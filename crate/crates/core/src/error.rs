use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error(
        "split plan infeasible for class `{class}`: target Jaccard [{lo}, {hi}], \
         achievable values for this class are {achievable:?}"
    )]
    InfeasibleSplit {
        class: String,
        lo: f64,
        hi: f64,
        achievable: Vec<f64>,
    },
    #[error("class `{class}` has {available} {label} samples in the train split, {needed} needed")]
    InsufficientSamples {
        class: String,
        label: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("no subject has both a compatible and an incompatible context")]
    NoCollision,
    #[error("class `{0}` has no samples")]
    EmptyClass(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("{got} adapter hooks supplied but the encoder has {max} layers")]
    TooManyHooks { got: usize, max: usize },
    #[error("layer {layer} is outside the adapted range 1..={k}")]
    LayerOutOfRange { layer: usize, k: usize },
    #[error("empty token sequence")]
    EmptyTokens,
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("template `{0}` has an unknown or missing placeholder")]
    BadTemplate(String),
    #[error("prompt set has no templates for the {0} state")]
    EmptyTemplates(&'static str),
    #[error("active branch set is empty")]
    EmptyActiveSet,
    #[error("branch mismatch: {0}")]
    BranchMismatch(String),
    #[error("embedding is not unit-normalized (norm {0})")]
    NotNormalized(f64),
    #[error("metric undefined: {0}")]
    MetricUndefined(String),
    #[error("unknown {what} `{name}`")]
    Unknown { what: &'static str, name: String },
    #[error("training diverged at {stage} step {step}: {reason}")]
    Divergence {
        stage: &'static str,
        step: u64,
        reason: String,
    },
    #[error("training mode requires a mask for every observation")]
    MissingMask,
    #[error("missing {0} adapter")]
    MissingAdapter(&'static str),
    #[error("protocol mismatch: {0}")]
    Protocol(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
