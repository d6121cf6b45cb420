use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step index {t} out of range for a {n_steps}-step schedule")]
    StepOutOfRange { t: usize, n_steps: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite values in {what}")]
    NonFinite { what: String },

    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite model output at diffusion step {t}")]
    NonFiniteStep { t: usize },

    #[error("no recorded graph for backward: {0}")]
    NoGraph(String),

    #[error("trajectory already scored")]
    AlreadyScored,

    #[error("trajectory {index} has no terminal reward")]
    Unscored { index: usize },

    #[error("stale trajectory {index}: generated by parameter version {traj_version}, policy is at {policy_version}")]
    StaleTrajectory {
        index: usize,
        traj_version: u64,
        policy_version: u64,
    },

    #[error("objective {algo} requires a reference model")]
    MissingReference { algo: String },

    #[error("pretraining diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("non-finite gradient at episode {episode}: {detail}")]
    NonFiniteGradient { episode: usize, detail: String },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    VersionMismatch { what: &'static str, found: u32, expected: u32 },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
