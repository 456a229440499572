//! Offline soft actor-critic on energy-gated model rollouts.

mod replay;
mod reward;
mod rollout;
mod sac;
mod train;

pub use replay::{ReplayBuffer, Sample};
pub use reward::{train_reward_model, RewardConfig, RewardModel, RewardReport};
pub use rollout::{rollout, RewardSource, RolloutConfig, RolloutStats};
pub use sac::{Actor, ActorCritic, SacConfig};
pub use train::{evaluate_policy, train_policy, PolicyConfig, PolicyLog, PolicyLogRow};

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::etm::EtmError;
use crate::ndgrad::NdError;
use crate::pessimism::PessimismError;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("empty dataset or batch")]
    Empty,
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error(transparent)]
    Etm(#[from] EtmError),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Pessimism(#[from] PessimismError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;
