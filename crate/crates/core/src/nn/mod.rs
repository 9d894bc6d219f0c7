//! Minimal dense neural engine: forward/backward passes, Adam, and the
//! encoder + classifier pairing used by every federated participant.

mod adam;
mod model;
mod network;

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use model::{Model, ModelArch, ModelOptimizer, StepError, StepStats};
pub use network::{
    init_network, BatchNorm, Dense, DenseGrad, ForwardTape, Mode, ModelParams, NetworkSpec, NormGrad, OutputKind,
    ParamGrads, BN_EPS, BN_MOMENTUM,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    Shape { what: &'static str, expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("train-mode batch-norm needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("stale tape: {0}")]
    StaleTape(String),
    #[error("non-finite gradient, step rejected")]
    NonFiniteGradient,
}
