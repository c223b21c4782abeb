//! Off-policy actor-critic learner: networks, replay, updates, value maps
//! and checkpoints.

pub mod buffer;
pub mod checkpoint;
pub mod nn;
pub mod qmap;
pub mod sac;

use thiserror::Error;

pub use buffer::{sample_batch, ReplayBuffer, Source, SuccessRecord, Transition};
pub use checkpoint::Checkpoint;
pub use qmap::{q_landscape, QGrid, SliceSpec};
pub use sac::{ActMode, Losses, Policy, Sac, TrainConfig, ACT_DIM};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),

    #[error("replay not ready: {have} < {need} online transitions")]
    NotReady { have: usize, need: usize },

    #[error("non-finite {what} at update {batch_id}")]
    NonFinite { what: &'static str, batch_id: u64 },

    #[error("observation dimension {got}, policy expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid transition: {0}")]
    InvalidTransition(String),

    #[error("constraint: {0}")]
    Constraint(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
