//! Supervising agent: mode decision, perception, box and waypoint
//! generation, plus the episodic memory that caches boxes per subgoal.
//!
//! Two agents implement [`Agent`]: the scripted [`OracleAgent`] that reads
//! ground truth, and [`RemoteAgent`] that speaks JSON over HTTP.

mod memory;
mod oracle;
mod remote;
pub mod wire;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::Observation;
use crate::env::{EnvConfig, EnvState, Task};
use crate::error::Result;
use crate::geometry::{CameraModel, PixelKeypoint, SpatialConstraint, WorldPoint};
use crate::primitives::{GuidancePlan, KeypointMap, PrimitiveConfig, TcpState, Waypoint};
use crate::Vec3;

pub use memory::{check_memory, record_outcome, EpisodicMemory, MemoryEntry};
pub use oracle::{OracleAgent, OracleConfig};
pub use remote::{FallbackPolicy, RemoteAgent, RemoteConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("malformed {what} payload: {reason}; raw: {raw}")]
    Malformed { what: &'static str, reason: String, raw: String },

    #[error("unknown primitive `{name}`; raw: {raw}")]
    UnknownPrimitive { name: String, raw: String },

    #[error("invalid bbox: {reason}; raw: {raw}")]
    InvalidBox { reason: String, raw: String },

    #[error("empty tool-call list; raw: {raw}")]
    EmptyPlan { raw: String },

    #[error("transport failure: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    ActionGuidance,
    ExplorationPruning,
}

impl InterventionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InterventionMode::ActionGuidance => "action_guidance",
            InterventionMode::ExplorationPruning => "exploration_pruning",
        }
    }
}

/// Task-phase label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Subgoal {
    pub id: String,
}

impl Subgoal {
    pub fn new(id: impl Into<String>) -> Self {
        Subgoal { id: id.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDecision {
    #[serde(rename = "strategy")]
    pub mode: InterventionMode,
    pub reasoning: String,
}

/// How much of the task a guidance plan covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceScope {
    /// Bring the robot back to a pre-contact pose; the policy finishes.
    Recovery,
    /// Attempt the whole task open loop.
    FullTask,
}

/// Per-task supervision settings shared by all agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProfile {
    pub task: Task,
    pub bbox_margins: Vec3,
    pub bbox_min_size: Vec3,
    pub workspace: SpatialConstraint,
    /// Phase id to preferred mode.
    pub rule_table: BTreeMap<String, InterventionMode>,
    pub default_mode: InterventionMode,
    pub guidance_scope: GuidanceScope,
    pub primitives: PrimitiveConfig,
    /// Insertion: fixture surface height above the goal, for the lift rule.
    pub surface_offset: f64,
}

impl TaskProfile {
    pub fn for_env(cfg: &EnvConfig) -> Self {
        let mut rules = BTreeMap::new();
        match cfg.task {
            Task::Insertion => {
                rules.insert("approach_socket".to_string(), InterventionMode::ActionGuidance);
                rules.insert("align_connector".to_string(), InterventionMode::ExplorationPruning);
                TaskProfile {
                    task: cfg.task,
                    bbox_margins: Vec3::new(0.005, 0.005, 0.03),
                    bbox_min_size: Vec3::new(0.01, 0.01, 0.01),
                    workspace: cfg.workspace,
                    rule_table: rules,
                    default_mode: InterventionMode::ActionGuidance,
                    guidance_scope: GuidanceScope::Recovery,
                    primitives: PrimitiveConfig { above_offset: 0.05, approach_offset: 0.02 },
                    surface_offset: cfg.insertion_depth,
                }
            }
            Task::Hanging => {
                for phase in ["approach_hook", "pass_over_hook", "release_knot"] {
                    rules.insert(phase.to_string(), InterventionMode::ActionGuidance);
                }
                TaskProfile {
                    task: cfg.task,
                    bbox_margins: Vec3::new(0.02, 0.02, 0.03),
                    bbox_min_size: Vec3::new(0.02, 0.02, 0.02),
                    workspace: cfg.workspace,
                    rule_table: rules,
                    default_mode: InterventionMode::ActionGuidance,
                    guidance_scope: GuidanceScope::FullTask,
                    primitives: PrimitiveConfig::default(),
                    surface_offset: 0.0,
                }
            }
        }
    }

    /// Mode from the rule table, falling back to the default.
    pub fn mode_for(&self, subgoal: &Subgoal) -> InterventionMode {
        self.rule_table.get(&subgoal.id).copied().unwrap_or(self.default_mode)
    }
}

/// What an agent sees at a trigger. `state` is ground truth: the scripted
/// oracle reads it; a remote agent only forwards `obs`.
#[derive(Debug, Clone, Copy)]
pub struct AgentContext<'a> {
    pub env_cfg: &'a EnvConfig,
    pub profile: &'a TaskProfile,
    pub state: &'a EnvState,
    pub obs: &'a Observation,
    pub subgoal: &'a Subgoal,
}

pub trait Agent: Send {
    fn name(&self) -> &str;

    fn decide_mode(&mut self, ctx: &AgentContext<'_>) -> Result<AgentDecision>;

    fn perceive(&mut self, ctx: &AgentContext<'_>, camera: &CameraModel) -> Result<Vec<PixelKeypoint>>;

    fn gen_bbox(&mut self, ctx: &AgentContext<'_>, keypoints3d: &[WorldPoint]) -> Result<SpatialConstraint>;

    fn gen_waypoints(&mut self, ctx: &AgentContext<'_>, keypoints: &KeypointMap) -> Result<GuidancePlan>;

    /// Hook on resolved waypoints before execution; identity by default.
    fn adjust_waypoints(&mut self, _waypoints: &mut [Waypoint], _tcp: &TcpState) {}

    /// Simulated inference delay per call, in control periods.
    fn latency_steps(&self) -> usize {
        0
    }
}
