//! Deterministic desk-scale manipulation simulators.
//!
//! * **Insertion**: the gripper holds a connector above a fixture whose top
//!   surface sits `insertion_depth` above the goal. Below the surface the TCP
//!   can only move inside the hole column (`|xy - goal| <= success_tol`), so
//!   the goal is reachable only by descending through the opening.
//! * **Hanging**: the gripper holds a string whose ring dangles `ring_drop`
//!   below the TCP with a stochastic swing. The ring hooks when it descends
//!   onto the hook from above; releasing while hooked succeeds.
//!
//! Reward is sparse: 1 on the success step, 0 otherwise.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::Matrix3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{Observation, Standardization};
use crate::geometry::{CameraModel, DepthLookup, SpatialConstraint};
use crate::primitives::{wrap_angle, TcpState};
use crate::supervisor::Subgoal;
use crate::Vec3;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid env config: {0}")]
    InvalidConfig(String),

    #[error("action component {index} = {value} exceeds limit {limit}")]
    ActionOutOfBounds { index: usize, value: f64, limit: f64 },

    #[error("expert failed to succeed after {0} attempts")]
    ExpertFailed(usize),

    #[error("demo file: {0}")]
    DemoFile(String),
}

pub type EnvResult<T> = std::result::Result<T, EnvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Insertion,
    Hanging,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Insertion => "insertion",
            Task::Hanging => "hanging",
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            Task::Insertion => "Insert the held USB connector into the USB port.",
            Task::Hanging => "Hang the held Chinese knot onto the hook.",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "insertion" => Ok(Task::Insertion),
            "hanging" => Ok(Task::Hanging),
            other => Err(format!("unknown task `{other}` (expected insertion or hanging)")),
        }
    }
}

/// Hardware rows kept for reference; the simulator does not use them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareMetadata {
    pub translational_stiffness: f64,
    pub rotational_stiffness: f64,
    pub wrist_resolution: [u32; 2],
    pub side_resolution: [u32; 2],
    pub initial_demos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub task: Task,
    pub horizon: usize,
    pub control_hz: f64,
    /// Half-ranges of the uniform reset around the nominal start.
    pub reset_xyz: Vec3,
    pub reset_rpy: Vec3,
    /// Per-component `|delta|` limit: 3 translational (m), 3 rotational (rad).
    pub action_limit: [f64; 6],
    pub success_tol: Vec3,
    pub transition_noise_sigma: f64,
    pub seed: u64,
    /// Goal (socket bottom, or hook contact point).
    pub goal: Vec3,
    /// Nominal TCP start relative to the goal.
    pub start_offset: Vec3,
    /// Uniform half-range jitter on the goal; zero by default.
    pub goal_jitter: Vec3,
    pub workspace: SpatialConstraint,
    /// Orientation deviation allowed from the goal orientation.
    pub rot_limit: f64,
    /// Insertion: fixture surface height above the goal.
    pub insertion_depth: f64,
    /// Insertion: fraction of lateral motion lost while pressing on the
    /// fixture surface outside the hole.
    pub surface_friction: f64,
    /// Hanging: ring hangs this far below the TCP.
    pub ring_drop: f64,
    /// Hanging: noise multiplier near the hook.
    pub near_hook_noise_factor: f64,
    /// Hanging: open the gripper automatically once hooked.
    pub auto_release: bool,
    pub hardware: HardwareMetadata,
}

impl EnvConfig {
    pub fn insertion() -> Self {
        let goal = Vec3::new(0.5, 0.0, 0.1);
        EnvConfig {
            task: Task::Insertion,
            horizon: 400,
            control_hz: 10.0,
            reset_xyz: Vec3::new(0.06, 0.06, 0.05),
            reset_rpy: Vec3::new(0.0, 0.0, 0.06),
            action_limit: [0.01, 0.01, 0.01, 0.05, 0.05, 0.05],
            success_tol: Vec3::new(0.002, 0.002, 0.002),
            transition_noise_sigma: 2e-4,
            seed: 0,
            goal,
            start_offset: Vec3::new(0.0, 0.0, 0.07),
            goal_jitter: Vec3::zeros(),
            workspace: SpatialConstraint {
                center: goal + Vec3::new(0.0, 0.0, 0.065),
                size: Vec3::new(0.3, 0.3, 0.19),
            },
            rot_limit: 0.5,
            insertion_depth: 0.01,
            surface_friction: 0.0,
            ring_drop: 0.04,
            near_hook_noise_factor: 3.0,
            auto_release: true,
            hardware: HardwareMetadata {
                translational_stiffness: 1800.0,
                rotational_stiffness: 150.0,
                wrist_resolution: [848, 480],
                side_resolution: [640, 480],
                initial_demos: 20,
            },
        }
    }

    pub fn hanging() -> Self {
        let goal = Vec3::new(0.5, 0.0, 0.3);
        EnvConfig {
            task: Task::Hanging,
            horizon: 200,
            control_hz: 10.0,
            reset_xyz: Vec3::new(0.02, 0.0, 0.02),
            reset_rpy: Vec3::zeros(),
            action_limit: [0.01, 0.01, 0.01, 0.05, 0.05, 0.05],
            success_tol: Vec3::new(0.015, 0.015, 0.03),
            transition_noise_sigma: 5e-4,
            seed: 0,
            goal,
            start_offset: Vec3::new(0.0, -0.1, 0.0),
            goal_jitter: Vec3::zeros(),
            workspace: SpatialConstraint {
                center: goal + Vec3::new(0.0, -0.05, 0.02),
                size: Vec3::new(0.3, 0.3, 0.25),
            },
            rot_limit: 0.5,
            insertion_depth: 0.01,
            surface_friction: 0.0,
            ring_drop: 0.04,
            near_hook_noise_factor: 3.0,
            auto_release: true,
            hardware: HardwareMetadata {
                translational_stiffness: 2000.0,
                rotational_stiffness: 150.0,
                wrist_resolution: [848, 480],
                side_resolution: [640, 480],
                initial_demos: 20,
            },
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Insertion => Self::insertion(),
            Task::Hanging => Self::hanging(),
        }
    }

    pub fn validate(&self) -> EnvResult<()> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        if self.success_tol.iter().any(|&t| t <= 0.0) {
            return bad("success tolerances must be positive");
        }
        if self.action_limit.iter().any(|&l| l <= 0.0) {
            return bad("action limits must be positive");
        }
        if !(self.control_hz > 0.0) || self.transition_noise_sigma < 0.0 {
            return bad("control_hz must be positive and noise non-negative");
        }
        if !(0.0..=1.0).contains(&self.surface_friction) {
            return bad("surface_friction must lie in [0, 1]");
        }
        self.workspace.validate().map_err(|e| EnvError::InvalidConfig(e.to_string()))
    }

    pub fn surface_z(&self, goal: &Vec3) -> f64 {
        goal.z + self.insertion_depth
    }

    pub fn nominal_start(&self) -> Vec3 {
        self.goal + self.start_offset
    }

    pub fn control_period(&self) -> f64 {
        1.0 / self.control_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperCommand {
    Open,
    Close,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvAction {
    /// `dx, dy, dz` (m), `droll, dpitch, dyaw` (rad).
    pub delta: [f64; 6],
    #[serde(default)]
    pub gripper: Option<GripperCommand>,
}

impl EnvAction {
    pub fn zero() -> Self {
        EnvAction { delta: [0.0; 6], gripper: None }
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::new(self.delta[0], self.delta[1], self.delta[2])
    }

    /// Componentwise clip to `limit`.
    pub fn clipped(&self, limit: &[f64; 6]) -> EnvAction {
        let mut out = *self;
        for (d, l) in out.delta.iter_mut().zip(limit) {
            *d = d.clamp(-l, *l);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub tcp: TcpState,
    pub goal_pose: TcpState,
    pub phase: Subgoal,
    /// Hanging: ring is hooked.
    pub object_attached: bool,
    pub step: usize,
    /// Insertion: current descent entered the hole through the opening.
    pub entered_from_above: bool,
    /// Hanging: ring offset from its rest position under the TCP.
    pub swing: Vec3,
    /// Hanging: ring was above the hook inside the capture column.
    pub ring_over_hook: bool,
    /// Hanging: the string left the gripper without being hooked.
    pub dropped: bool,
}

impl EnvState {
    /// Hanging ring keypoint.
    pub fn ring(&self, cfg: &EnvConfig) -> Vec3 {
        self.tcp.position + Vec3::new(0.0, 0.0, -cfg.ring_drop) + self.swing
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next: EnvState,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

fn uniform_vec(rng: &mut impl Rng, half: &Vec3) -> Vec3 {
    Vec3::from_fn(|i, _| if half[i] > 0.0 { rng.gen_range(-half[i]..=half[i]) } else { 0.0 })
}

pub fn phase_of(cfg: &EnvConfig, tcp: &TcpState, goal: &Vec3, attached: bool, ring: &Vec3) -> Subgoal {
    match cfg.task {
        Task::Insertion => {
            let lateral = ((tcp.position.x - goal.x).powi(2) + (tcp.position.y - goal.y).powi(2)).sqrt();
            let height = tcp.position.z - cfg.surface_z(goal);
            if lateral <= 0.02 && height <= 0.05 {
                Subgoal::new("align_connector")
            } else {
                Subgoal::new("approach_socket")
            }
        }
        Task::Hanging => {
            if attached {
                Subgoal::new("release_knot")
            } else if (ring - goal).norm() <= 0.04 {
                Subgoal::new("pass_over_hook")
            } else {
                Subgoal::new("approach_hook")
            }
        }
    }
}

pub fn reset(cfg: &EnvConfig, rng: &mut impl Rng) -> EnvState {
    let goal = cfg.goal + uniform_vec(rng, &cfg.goal_jitter);
    let pos = goal + cfg.start_offset + uniform_vec(rng, &cfg.reset_xyz);
    let rpy = uniform_vec(rng, &cfg.reset_rpy);
    let gripper = 0.0;
    let tcp = TcpState::new(cfg.workspace.project(&pos), rpy, gripper);
    let goal_pose = TcpState::new(goal, Vec3::zeros(), gripper);
    let swing = Vec3::zeros();
    let ring = tcp.position + Vec3::new(0.0, 0.0, -cfg.ring_drop);
    EnvState {
        phase: phase_of(cfg, &tcp, &goal, false, &ring),
        tcp,
        goal_pose,
        object_attached: false,
        step: 0,
        entered_from_above: false,
        swing,
        ring_over_hook: false,
        dropped: false,
    }
}

fn in_hole(cfg: &EnvConfig, p: &Vec3, goal: &Vec3) -> bool {
    (p.x - goal.x).abs() <= cfg.success_tol.x && (p.y - goal.y).abs() <= cfg.success_tol.y
}

/// Insertion success predicate on a single state.
pub fn insertion_success(p: &Vec3, goal: &Vec3, tol: &Vec3, entered_from_above: bool) -> bool {
    entered_from_above && (0..3).all(|i| (p[i] - goal[i]).abs() <= tol[i])
}

fn check_action(cfg: &EnvConfig, action: &EnvAction) -> EnvResult<()> {
    for (index, (&value, &limit)) in action.delta.iter().zip(&cfg.action_limit).enumerate() {
        if !value.is_finite() || value.abs() > limit * (1.0 + 1e-9) {
            return Err(EnvError::ActionOutOfBounds { index, value, limit });
        }
    }
    Ok(())
}

pub fn step(state: &EnvState, action: &EnvAction, cfg: &EnvConfig, rng: &mut impl Rng) -> EnvResult<StepResult> {
    check_action(cfg, action)?;
    let goal = state.goal_pose.position;
    let mut next = state.clone();
    next.step += 1;

    let sigma = match cfg.task {
        Task::Hanging if (state.ring(cfg) - goal).norm() < 0.05 => {
            cfg.transition_noise_sigma * cfg.near_hook_noise_factor
        }
        _ => cfg.transition_noise_sigma,
    };
    let noise = if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("sigma is finite");
        Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
    } else {
        Vec3::zeros()
    };

    let prev = state.tcp.position;
    let mut p = cfg.workspace.project(&(prev + action.translation() + noise));
    for i in 0..3 {
        let r = wrap_angle(state.tcp.rpy[i] + action.delta[3 + i]);
        let dev = wrap_angle(r - state.goal_pose.rpy[i]).clamp(-cfg.rot_limit, cfg.rot_limit);
        next.tcp.rpy[i] = wrap_angle(state.goal_pose.rpy[i] + dev);
    }
    match action.gripper {
        Some(GripperCommand::Open) => next.tcp.gripper = 1.0,
        Some(GripperCommand::Close) => next.tcp.gripper = 0.0,
        None => {}
    }

    let mut success = false;
    match cfg.task {
        Task::Insertion => {
            let surface = cfg.surface_z(&goal);
            if p.z < surface {
                if prev.z < surface {
                    // Inside the hole: walls bound the lateral motion.
                    p.x = p.x.clamp(goal.x - cfg.success_tol.x, goal.x + cfg.success_tol.x);
                    p.y = p.y.clamp(goal.y - cfg.success_tol.y, goal.y + cfg.success_tol.y);
                } else if in_hole(cfg, &p, &goal) {
                    next.entered_from_above = true;
                } else {
                    let k = 1.0 - cfg.surface_friction;
                    p.x = prev.x + k * (p.x - prev.x);
                    p.y = prev.y + k * (p.y - prev.y);
                    p.z = surface;
                }
                p.z = p.z.max(goal.z);
            } else {
                next.entered_from_above = false;
            }
            next.tcp.position = p;
            success = insertion_success(&p, &goal, &cfg.success_tol, next.entered_from_above);
        }
        Task::Hanging => {
            next.tcp.position = p;
            if !state.dropped {
                let swing_noise = if sigma > 0.0 {
                    let n = Normal::new(0.0, 2.0 * sigma).expect("sigma is finite");
                    Vec3::new(n.sample(rng), n.sample(rng), 0.0)
                } else {
                    Vec3::zeros()
                };
                next.swing = state.swing * 0.8 + swing_noise;
                let ring = next.ring(cfg);
                let tol = cfg.success_tol;
                let d = ring - goal;
                let lateral_in = d.x.abs() <= tol.x && d.y.abs() <= tol.y;
                let above = lateral_in && d.z > 0.003 && d.z <= 0.04;
                let hooked_band = lateral_in && d.z <= 0.003 && d.z >= -tol.z;
                let relaxed = d.x.abs() <= tol.x + 0.01 && d.y.abs() <= tol.y + 0.01 && d.z >= -tol.z - 0.02 && d.z <= 0.01;
                if state.object_attached {
                    next.object_attached = relaxed;
                } else {
                    next.object_attached = hooked_band && state.ring_over_hook;
                }
                next.ring_over_hook = above || (state.ring_over_hook && lateral_in && d.z > -tol.z);

                let release = matches!(action.gripper, Some(GripperCommand::Open))
                    || (cfg.auto_release && next.object_attached);
                if release {
                    next.tcp.gripper = 1.0;
                    if next.object_attached {
                        success = true;
                    } else {
                        next.dropped = true;
                    }
                }
            }
        }
    }

    let ring = next.ring(cfg);
    next.phase = phase_of(cfg, &next.tcp, &goal, next.object_attached, &ring);
    let done = success || next.step >= cfg.horizon;
    Ok(StepResult { next, reward: if success { 1.0 } else { 0.0 }, done, success })
}

/// `proprio = [x, y, z, roll, pitch, yaw, gripper]`.
/// Insertion `scene = [goal x, y, z, goal yaw]`;
/// hanging `scene = [hook x, y, z, ring - tcp (3), attached]`.
pub fn observe(state: &EnvState, cfg: &EnvConfig) -> Observation {
    let t = &state.tcp;
    let proprio = vec![t.position.x, t.position.y, t.position.z, t.rpy.x, t.rpy.y, t.rpy.z, t.gripper];
    let g = &state.goal_pose;
    let scene = match cfg.task {
        Task::Insertion => vec![g.position.x, g.position.y, g.position.z, g.rpy.z],
        Task::Hanging => {
            let rel = state.ring(cfg) - t.position;
            vec![g.position.x, g.position.y, g.position.z, rel.x, rel.y, rel.z, f64::from(u8::from(state.object_attached))]
        }
    };
    Observation { proprio, scene, step_index: state.step }
}

pub fn observation_dim(cfg: &EnvConfig) -> usize {
    7 + match cfg.task {
        Task::Insertion => 4,
        Task::Hanging => 7,
    }
}

/// Task-frame standardisation: positions relative to the nominal goal in
/// units of 5 cm, angles in units of 0.2 rad.
pub fn standardization(cfg: &EnvConfig, bias: f64) -> Standardization {
    let g = cfg.goal;
    let (pos, ang) = (20.0, 5.0);
    let mut center = vec![g.x, g.y, g.z, 0.0, 0.0, 0.0, 0.0];
    let mut scale = vec![pos, pos, pos, ang, ang, ang, 1.0];
    match cfg.task {
        Task::Insertion => {
            center.extend_from_slice(&[g.x, g.y, g.z, 0.0]);
            scale.extend_from_slice(&[pos, pos, pos, ang]);
        }
        Task::Hanging => {
            center.extend_from_slice(&[g.x, g.y, g.z, 0.0, 0.0, -cfg.ring_drop, 0.0]);
            scale.extend_from_slice(&[pos, pos, pos, pos, pos, pos, 1.0]);
        }
    }
    Standardization { center, scale, bias }
}

/// Scripted expert: one action toward success under nominal kinematics.
pub fn expert_action(state: &EnvState, cfg: &EnvConfig) -> EnvAction {
    let lim = &cfg.action_limit;
    let goal = state.goal_pose.position;
    let tcp = state.tcp.position;
    let mut delta = [0.0; 6];
    for i in 0..3 {
        delta[3 + i] = wrap_angle(state.goal_pose.rpy[i] - state.tcp.rpy[i]);
    }
    let mut gripper = None;
    match cfg.task {
        Task::Insertion => {
            let e = goal - tcp;
            let aligned = e.x.abs() <= 0.25 * cfg.success_tol.x && e.y.abs() <= 0.25 * cfg.success_tol.y;
            let below = tcp.z < cfg.surface_z(&goal);
            delta[0] = e.x;
            delta[1] = e.y;
            let z_target = if aligned || below { goal.z } else { cfg.surface_z(&goal) + 0.008 };
            delta[2] = z_target - tcp.z;
        }
        Task::Hanging => {
            let ring = state.ring(cfg);
            let d = ring - goal;
            if state.object_attached {
                gripper = Some(GripperCommand::Open);
            } else {
                let aligned = d.x.abs() <= 0.003 && d.y.abs() <= 0.003;
                let target_ring = if state.ring_over_hook && aligned {
                    goal + Vec3::new(0.0, 0.0, -0.005)
                } else {
                    goal + Vec3::new(0.0, 0.0, 0.015)
                };
                let dt = target_ring - ring;
                delta[0] = dt.x;
                delta[1] = dt.y;
                delta[2] = dt.z;
            }
        }
    }
    EnvAction { delta, gripper }.clipped(lim)
}

/// One stored env transition, in file field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvTransition {
    pub state: EnvState,
    pub action: EnvAction,
    pub reward: f64,
    pub next: EnvState,
    pub done: bool,
    pub success: bool,
    pub episode: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoEpisode {
    pub id: usize,
    pub transitions: Vec<EnvTransition>,
}

impl DemoEpisode {
    /// Observation sequence `o_0 .. o_T`.
    pub fn observations(&self, cfg: &EnvConfig) -> Vec<Observation> {
        let mut obs: Vec<Observation> = self.transitions.iter().map(|t| observe(&t.state, cfg)).collect();
        if let Some(last) = self.transitions.last() {
            obs.push(observe(&last.next, cfg));
        }
        obs
    }

    pub fn succeeded(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.success)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub task: Task,
    pub episodes: Vec<DemoEpisode>,
}

pub const DEMO_FORMAT: &str = "agps-demos";
pub const DEMO_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DemoHeader {
    format: String,
    version: u32,
    task: Task,
    episodes: usize,
    fields: Vec<String>,
}

impl DemoSet {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &EnvTransition> {
        self.episodes.iter().flat_map(|e| e.transitions.iter())
    }

    /// Line-delimited JSON: a header line, then one transition per line with
    /// fields `state, action, reward, next, done, success, episode, step`.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = DemoHeader {
            format: DEMO_FORMAT.into(),
            version: DEMO_VERSION,
            task: self.task,
            episodes: self.episodes.len(),
            fields: ["state", "action", "reward", "next", "done", "success", "episode", "step"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for t in self.transitions() {
            writeln!(w, "{}", serde_json::to_string(t)?)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> EnvResult<DemoSet> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| EnvError::DemoFile("empty file".into()))?
            .map_err(|e| EnvError::DemoFile(e.to_string()))?;
        let header: DemoHeader =
            serde_json::from_str(&first).map_err(|e| EnvError::DemoFile(format!("bad header: {e}")))?;
        if header.format != DEMO_FORMAT || header.version != DEMO_VERSION {
            return Err(EnvError::DemoFile(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut episodes: Vec<DemoEpisode> = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| EnvError::DemoFile(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: EnvTransition = serde_json::from_str(&line)
                .map_err(|e| EnvError::DemoFile(format!("line {}: {e}", n + 2)))?;
            match episodes.last_mut() {
                Some(ep) if ep.id == t.episode => ep.transitions.push(t),
                _ => episodes.push(DemoEpisode { id: t.episode, transitions: vec![t] }),
            }
        }
        if episodes.len() != header.episodes {
            return Err(EnvError::DemoFile(format!(
                "header announces {} episodes, found {}",
                header.episodes,
                episodes.len()
            )));
        }
        Ok(DemoSet { task: header.task, episodes })
    }
}

/// Runs the expert from a fresh reset until done.
pub fn rollout_expert(cfg: &EnvConfig, rng: &mut impl Rng, episode: usize) -> EnvResult<DemoEpisode> {
    let mut state = reset(cfg, rng);
    let mut transitions = Vec::new();
    loop {
        let action = expert_action(&state, cfg);
        let res = step(&state, &action, cfg, rng)?;
        transitions.push(EnvTransition {
            state: state.clone(),
            action,
            reward: res.reward,
            next: res.next.clone(),
            done: res.done,
            success: res.success,
            episode,
            step: state.step,
        });
        state = res.next;
        if res.done {
            break;
        }
    }
    Ok(DemoEpisode { id: episode, transitions })
}

/// `n` successful expert episodes; failed attempts are resampled up to a cap.
pub fn generate_demos(cfg: &EnvConfig, n: usize, rng: &mut impl Rng) -> EnvResult<DemoSet> {
    cfg.validate()?;
    if n == 0 {
        return Err(EnvError::InvalidConfig("demo count must be >= 1".into()));
    }
    let cap = 10 * n + 10;
    let mut episodes = Vec::with_capacity(n);
    let mut attempts = 0;
    while episodes.len() < n {
        if attempts == cap {
            return Err(EnvError::ExpertFailed(attempts));
        }
        attempts += 1;
        let ep = rollout_expert(cfg, rng, episodes.len())?;
        if ep.succeeded() {
            episodes.push(ep);
        }
    }
    Ok(DemoSet { task: cfg.task, episodes })
}

/// Horizontal rectangle at height `h`, optionally with a rectangular cut-out.
#[derive(Debug, Clone)]
struct Plane {
    h: f64,
    lo: [f64; 2],
    hi: [f64; 2],
    hole: Option<([f64; 2], [f64; 2])>,
}

impl Plane {
    fn covers(&self, p: &Vec3) -> bool {
        let inside = |lo: &[f64; 2], hi: &[f64; 2]| p.x >= lo[0] && p.x <= hi[0] && p.y >= lo[1] && p.y <= hi[1];
        inside(&self.lo, &self.hi) && !self.hole.as_ref().is_some_and(|(lo, hi)| inside(lo, hi))
    }
}

/// Analytic scene seen by the synthetic camera: horizontal planes, discs
/// facing the camera, and a far backdrop.
#[derive(Debug, Clone)]
struct SceneDepth {
    eye: Vec3,
    r: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    planes: Vec<Plane>,
    /// (centre, radius).
    discs: Vec<(Vec3, f64)>,
    backdrop: f64,
}

impl DepthLookup for SceneDepth {
    fn depth(&self, u: f64, v: f64) -> Option<f64> {
        // Ray direction in world with unit camera-frame z, so the ray
        // parameter is the z-depth.
        let dir = self.r.transpose() * (self.k_inv * Vec3::new(u, v, 1.0));
        let mut best = f64::INFINITY;
        if dir.z.abs() > 1e-12 {
            for plane in &self.planes {
                let s = (plane.h - self.eye.z) / dir.z;
                if s > 0.0 && s < best && plane.covers(&(self.eye + dir * s)) {
                    best = s;
                }
            }
        }
        let axis = self.r.row(2).transpose();
        for &(c, radius) in &self.discs {
            let s = (c - self.eye).dot(&axis);
            if s > 0.0 && s < best && (self.eye + dir * s - c).norm() <= radius {
                best = s;
            }
        }
        Some(if best.is_finite() { best } else { self.backdrop })
    }
}

fn camera_intrinsics() -> Matrix3<f64> {
    Matrix3::new(600.0, 0.0, 320.0, 0.0, 600.0, 240.0, 0.0, 0.0, 1.0)
}

/// `(eye, target)` relative to the goal. The target sits on the optical axis
/// so its normalised pixel is exactly (500, 500).
fn camera_pose(cfg: &EnvConfig, goal: &Vec3) -> (Vec3, Vec3) {
    match cfg.task {
        Task::Insertion => (goal + Vec3::new(0.0, -0.06, 0.45), *goal),
        Task::Hanging => (goal + Vec3::new(0.4, -0.05, 0.05), *goal),
    }
}

fn build_camera(cfg: &EnvConfig, goal: Vec3, markers: Vec<(Vec3, f64)>) -> CameraModel {
    let (eye, target) = camera_pose(cfg, &cfg.goal);
    let k = camera_intrinsics();
    let [w, h] = cfg.hardware.side_resolution;
    let dummy: Arc<dyn DepthLookup> = Arc::new(|_: f64, _: f64| Some(1.0));
    let base = CameraModel::look_at(eye, target, Vec3::y(), k, w, h, dummy).expect("fixed camera is valid");
    let table = Plane { h: cfg.goal.z - 0.05, lo: [-10.0, -10.0], hi: [10.0, 10.0], hole: None };
    let mut planes = vec![table];
    let mut discs = markers;
    match cfg.task {
        Task::Insertion => {
            let (tx, ty) = (cfg.success_tol.x, cfg.success_tol.y);
            let hole_lo = [goal.x - tx, goal.y - ty];
            let hole_hi = [goal.x + tx, goal.y + ty];
            planes.push(Plane {
                h: cfg.surface_z(&goal),
                lo: [goal.x - 0.05, goal.y - 0.05],
                hi: [goal.x + 0.05, goal.y + 0.05],
                hole: Some((hole_lo, hole_hi)),
            });
            planes.push(Plane { h: goal.z, lo: hole_lo, hi: hole_hi, hole: None });
        }
        Task::Hanging => discs.push((goal, 0.008)),
    }
    let depth = SceneDepth {
        eye,
        r: *base.rotation(),
        k_inv: k.try_inverse().expect("intrinsics invertible"),
        planes,
        discs,
        backdrop: 5.0,
    };
    CameraModel::new(k, *base.rotation(), *base.translation(), w, h, Arc::new(depth)).expect("fixed camera is valid")
}

/// Fixed camera over the static scene.
pub fn camera(cfg: &EnvConfig) -> CameraModel {
    build_camera(cfg, cfg.goal, Vec::new())
}

/// Camera whose depth also sees the dangling ring in `state`. The held
/// connector and gripper are not rendered; their pose comes from proprio.
pub fn camera_for_state(cfg: &EnvConfig, state: &EnvState) -> CameraModel {
    let mut markers = Vec::new();
    if cfg.task == Task::Hanging && !state.dropped {
        markers.push((state.ring(cfg), 0.006));
    }
    build_camera(cfg, state.goal_pose.position, markers)
}

/// Ground-truth task keypoints `(name, position, attached_to_gripper)`.
/// The TCP itself is known from proprio and is not listed.
pub fn task_keypoints(cfg: &EnvConfig, state: &EnvState) -> Vec<(&'static str, Vec3, bool)> {
    let g = state.goal_pose.position;
    match cfg.task {
        Task::Insertion => vec![("socket", g, false)],
        Task::Hanging => vec![("ring_kp", state.ring(cfg), true), ("hook", g, false)],
    }
}

/// Stateful convenience wrapper owning config, RNG and current state.
#[derive(Debug, Clone)]
pub struct SimEnv {
    pub cfg: EnvConfig,
    rng: ChaCha8Rng,
    state: EnvState,
}

impl SimEnv {
    pub fn new(cfg: EnvConfig, seed: u64) -> EnvResult<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = reset(&cfg, &mut rng);
        Ok(SimEnv { cfg, rng, state })
    }

    pub fn reset(&mut self) -> &EnvState {
        self.state = reset(&self.cfg, &mut self.rng);
        &self.state
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn observe(&self) -> Observation {
        observe(&self.state, &self.cfg)
    }

    pub fn step(&mut self, action: &EnvAction) -> EnvResult<StepResult> {
        let res = step(&self.state, action, &self.cfg, &mut self.rng)?;
        self.state = res.next.clone();
        Ok(res)
    }
}
