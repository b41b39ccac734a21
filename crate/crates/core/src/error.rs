use thiserror::Error;

/// Unified error type for the whole toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a scalar, got shape {shape:?}")]
    Rank { op: String, shape: Vec<usize> },
    #[error("all positions are masked; at least one must survive")]
    DegenerateMask,
    #[error("bag {bag_id} has no instances")]
    EmptyBag { bag_id: String },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("step {step} outside schedule range 0..={total}")]
    ScheduleRange { step: u64, total: u64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("bag {bag_id}: {msg}")]
    Schema { bag_id: String, msg: String },
    #[error("unsupported checkpoint schema version {found}, supported: {supported}")]
    Version { found: u32, supported: u32 },
    #[error("mask plan for bag {bag_id} names index {index}, bag size is {bag_size}")]
    PlanMismatch {
        bag_id: String,
        index: usize,
        bag_size: usize,
    },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("dataset of {n} bags is too small for k={k} folds")]
    FoldSize { n: usize, k: usize },
    #[error("grid search failed: {0}")]
    SearchFailed(String),
    #[error("gradient tape already consumed by backward")]
    TapeConsumed,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
