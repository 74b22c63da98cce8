//! Width search space, sandwich-rule sampling and in-place distillation.
//!
//! Each training step forwards the full supernet once, trains it on labels,
//! and uses its detached softened output as the teacher for the smallest and
//! `k_random` random sub-networks. All gradients land in the shared weights and
//! are applied in a single optimizer step.

mod single;
mod space;
mod train;

pub use single::{new_student, train_student_epoch, StudentMetrics};
pub use space::{sample_sandwich, SearchSpace, SubnetConfig};
pub use train::{
    assemble_kd_loss, distill_gradient, evaluate_accuracy, step_gradient, supernet_gradient, train_epoch, train_step,
    write_metrics_csv, EpochMetrics, KdMode, NetworkGrad, StepReport, SubnetTargets, TrainConfig, TrainState,
    METRICS_HEADER,
};

use crate::data::DataError;
use crate::divergence::DivergenceError;
use crate::nn::{CheckpointError, NnError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SupernetError {
    #[error("invalid search space: {0}")]
    Space(String),
    #[error("invalid training config: {0}")]
    Config(String),
    /// Training diverged; `config` names the offending sub-network.
    #[error("non-finite {what} in sub-network {config}")]
    NonFinite { config: String, what: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
}

pub type Result<T, E = SupernetError> = std::result::Result<T, E>;
