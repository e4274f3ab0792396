use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),

    #[error("argument {v} is outside the domain of the {kind} divergence")]
    Infeasible { kind: &'static str, v: f64 },

    #[error("empty batch: subproblems need at least one data column")]
    EmptyBatch,

    #[error("{0}")]
    Unsupported(String),

    #[error("idx format: {0}")]
    Idx(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
