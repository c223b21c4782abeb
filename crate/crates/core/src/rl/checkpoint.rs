use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sac::Sac;
use super::RlError;
use crate::env::Task;

pub const CHECKPOINT_FORMAT: &str = "agps-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Learner state as versioned JSON, tagged with the hash of the run config
/// that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub task: Task,
    pub env_steps: usize,
    pub sac: Sac,
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>, task: Task, env_steps: usize, sac: Sac) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            task,
            env_steps,
            sac,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), RlError> {
        let s = serde_json::to_string(self).map_err(|e| RlError::Checkpoint(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| RlError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, RlError> {
        let s = std::fs::read_to_string(path).map_err(|e| RlError::Checkpoint(format!("{}: {e}", path.display())))?;
        let c: Checkpoint = serde_json::from_str(&s).map_err(|e| RlError::Checkpoint(format!("{}: {e}", path.display())))?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(RlError::Checkpoint(format!("unsupported checkpoint {} v{}", c.format, c.version)));
        }
        if !(c.sac.policy.actor.is_finite() && c.sac.q1.is_finite() && c.sac.q2.is_finite()) {
            return Err(RlError::Checkpoint("non-finite weights".into()));
        }
        Ok(c)
    }
}
