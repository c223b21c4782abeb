//! Action primitives as waypoint generators, and a proportional tracker that
//! turns waypoints into bounded end-effector delta actions.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvAction, GripperCommand};
use crate::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum PrimitiveError {
    #[error("unknown keypoint `{0}`")]
    UnknownKeypoint(String),

    #[error("malformed primitive call: {0}")]
    Malformed(String),

    #[error("guidance plan is empty")]
    EmptyPlan,

    #[error("invalid tracker configuration: {0}")]
    InvalidTracker(String),
}

pub type PrimitiveResult<T> = std::result::Result<T, PrimitiveError>;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a.rem_euclid(2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    }
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TcpState {
    pub position: Vec3,
    pub rpy: Vec3,
    /// 0 closed, 1 open.
    pub gripper: f64,
}

impl TcpState {
    pub fn new(position: Vec3, rpy: Vec3, gripper: f64) -> Self {
        TcpState { position, rpy: rpy.map(wrap_angle), gripper }
    }
}

/// One primitive, tagged by `name` on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Primitive {
    MoveToPose {
        target: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rpy: Option<[f64; 3]>,
    },
    PreGrasp {
        target: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rpy: Option<[f64; 3]>,
    },
    MoveDelta {
        from: String,
        to: String,
    },
    Lift {
        height: f64,
    },
    Grasp,
    Release,
}

pub const PRIMITIVE_NAMES: [&str; 6] = ["move_to_pose", "pre_grasp", "move_delta", "lift", "grasp", "release"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveCall {
    #[serde(flatten)]
    pub primitive: Primitive,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<String>,
}

impl PrimitiveCall {
    pub fn new(primitive: Primitive) -> Self {
        PrimitiveCall { primitive, analysis: None }
    }

    pub fn with_analysis(mut self, analysis: impl Into<String>) -> Self {
        self.analysis = Some(analysis.into());
        self
    }

    pub fn name(&self) -> &'static str {
        match self.primitive {
            Primitive::MoveToPose { .. } => "move_to_pose",
            Primitive::PreGrasp { .. } => "pre_grasp",
            Primitive::MoveDelta { .. } => "move_delta",
            Primitive::Lift { .. } => "lift",
            Primitive::Grasp => "grasp",
            Primitive::Release => "release",
        }
    }

    pub fn validate(&self) -> PrimitiveResult<()> {
        match &self.primitive {
            Primitive::Lift { height } if !(*height > 0.0 && height.is_finite()) => {
                Err(PrimitiveError::Malformed(format!("lift height must be > 0, got {height}")))
            }
            Primitive::MoveToPose { target, rpy } | Primitive::PreGrasp { target, rpy } => {
                if target.is_empty() {
                    return Err(PrimitiveError::Malformed(format!("{} without target", self.name())));
                }
                if rpy.is_some_and(|r| r.iter().any(|x| !x.is_finite())) {
                    return Err(PrimitiveError::Malformed("non-finite rpy".into()));
                }
                Ok(())
            }
            Primitive::MoveDelta { from, to } if from.is_empty() || to.is_empty() => {
                Err(PrimitiveError::Malformed("move_delta needs both `from` and `to`".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidancePlan {
    pub calls: Vec<PrimitiveCall>,
}

impl GuidancePlan {
    pub fn new(calls: Vec<PrimitiveCall>) -> PrimitiveResult<Self> {
        if calls.is_empty() {
            return Err(PrimitiveError::EmptyPlan);
        }
        for c in &calls {
            c.validate()?;
        }
        Ok(GuidancePlan { calls })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WaypointKind {
    Motion,
    Gripper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub target: TcpState,
    pub kind: WaypointKind,
}

/// Named 3D keypoints. Points marked attached (the TCP, a held object) move
/// rigidly with the gripper while a plan executes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeypointMap {
    points: BTreeMap<String, Vec3>,
    attached: BTreeSet<String>,
}

impl KeypointMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, p: Vec3) {
        self.points.insert(name.into(), p);
    }

    pub fn insert_attached(&mut self, name: impl Into<String>, p: Vec3) {
        let name = name.into();
        self.attached.insert(name.clone());
        self.points.insert(name, p);
    }

    pub fn get(&self, name: &str) -> Option<Vec3> {
        self.points.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.points.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.points.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Copy with attached points shifted by `offset`.
    pub fn shifted_attached(&self, offset: Vec3) -> KeypointMap {
        let mut out = self.clone();
        for name in &self.attached {
            if let Some(p) = out.points.get_mut(name) {
                *p += offset;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrimitiveConfig {
    /// Height added for `above_<kp>` targets.
    pub above_offset: f64,
    /// `pre_grasp` stops this far above its target.
    pub approach_offset: f64,
}

impl Default for PrimitiveConfig {
    fn default() -> Self {
        PrimitiveConfig { above_offset: 0.05, approach_offset: 0.03 }
    }
}

fn lookup(kps: &KeypointMap, name: &str, cfg: &PrimitiveConfig) -> PrimitiveResult<Vec3> {
    if let Some(p) = kps.get(name) {
        return Ok(p);
    }
    if let Some(base) = name.strip_prefix("above_") {
        if let Some(p) = kps.get(base) {
            return Ok(p + Vec3::new(0.0, 0.0, cfg.above_offset));
        }
    }
    Err(PrimitiveError::UnknownKeypoint(name.to_string()))
}

/// Resolves one call against the keypoints and the current TCP.
pub fn resolve(
    call: &PrimitiveCall,
    kps: &KeypointMap,
    tcp: &TcpState,
    cfg: &PrimitiveConfig,
) -> PrimitiveResult<Waypoint> {
    call.validate()?;
    let motion = |position: Vec3, rpy: Option<[f64; 3]>| Waypoint {
        target: TcpState::new(position, rpy.map_or(tcp.rpy, |r| Vec3::new(r[0], r[1], r[2])), tcp.gripper),
        kind: WaypointKind::Motion,
    };
    let gripper = |g: f64| Waypoint { target: TcpState { gripper: g, ..*tcp }, kind: WaypointKind::Gripper };
    Ok(match &call.primitive {
        Primitive::MoveToPose { target, rpy } => motion(lookup(kps, target, cfg)?, *rpy),
        Primitive::PreGrasp { target, rpy } => {
            motion(lookup(kps, target, cfg)? + Vec3::new(0.0, 0.0, cfg.approach_offset), *rpy)
        }
        Primitive::MoveDelta { from, to } => {
            let delta = lookup(kps, to, cfg)? - lookup(kps, from, cfg)?;
            motion(tcp.position + delta, None)
        }
        Primitive::Lift { height } => motion(tcp.position + Vec3::new(0.0, 0.0, *height), None),
        Primitive::Grasp => gripper(0.0),
        Primitive::Release => gripper(1.0),
    })
}

/// Resolves a whole plan, each call against the TCP the previous waypoint
/// leaves behind. Attached keypoints follow the TCP.
pub fn resolve_plan(
    plan: &GuidancePlan,
    kps: &KeypointMap,
    tcp0: &TcpState,
    cfg: &PrimitiveConfig,
) -> PrimitiveResult<Vec<Waypoint>> {
    let mut tcp = *tcp0;
    let mut out = Vec::with_capacity(plan.calls.len());
    for call in &plan.calls {
        let shifted = kps.shifted_attached(tcp.position - tcp0.position);
        let wp = resolve(call, &shifted, &tcp, cfg)?;
        tcp = wp.target;
        out.push(wp);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Per-axis translational step limit (m).
    pub max_step: f64,
    /// Per-axis rotational step limit (rad).
    pub max_rot_step: f64,
    pub gain: f64,
    /// Per-axis position tolerance (m).
    pub tol: f64,
    pub rot_tol: f64,
    /// Steps allowed per waypoint.
    pub step_cap: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig { max_step: 0.01, max_rot_step: 0.05, gain: 1.0, tol: 0.005, rot_tol: 0.02, step_cap: 100 }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> PrimitiveResult<()> {
        if !(self.max_step > 0.0 && self.max_rot_step > 0.0 && self.gain > 0.0 && self.tol >= 0.0) {
            return Err(PrimitiveError::InvalidTracker(format!("{self:?}")));
        }
        Ok(())
    }
}

pub fn waypoint_reached(tcp: &TcpState, wp: &Waypoint, cfg: &TrackerConfig) -> bool {
    match wp.kind {
        WaypointKind::Gripper => (tcp.gripper - wp.target.gripper).abs() < 0.5,
        WaypointKind::Motion => {
            let pos = (wp.target.position - tcp.position).amax();
            let rot = (0..3).map(|i| wrap_angle(wp.target.rpy[i] - tcp.rpy[i]).abs()).fold(0.0, f64::max);
            pos <= cfg.tol && rot <= cfg.rot_tol
        }
    }
}

/// One proportional-control action toward `wp`, or `None` once reached.
pub fn track_step(tcp: &TcpState, wp: &Waypoint, cfg: &TrackerConfig) -> Option<EnvAction> {
    if waypoint_reached(tcp, wp, cfg) {
        return None;
    }
    match wp.kind {
        WaypointKind::Gripper => Some(EnvAction {
            delta: [0.0; 6],
            gripper: Some(if wp.target.gripper >= 0.5 { GripperCommand::Open } else { GripperCommand::Close }),
        }),
        WaypointKind::Motion => {
            let mut delta = [0.0; 6];
            for i in 0..3 {
                let e = wp.target.position[i] - tcp.position[i];
                delta[i] = (cfg.gain * e).clamp(-cfg.max_step, cfg.max_step);
                let r = wrap_angle(wp.target.rpy[i] - tcp.rpy[i]);
                delta[3 + i] = (cfg.gain * r).clamp(-cfg.max_rot_step, cfg.max_rot_step);
            }
            Some(EnvAction { delta, gripper: None })
        }
    }
}

/// Nominal kinematics used by the offline tracker: `tcp += delta`.
pub fn apply_nominal(tcp: &TcpState, a: &EnvAction) -> TcpState {
    let mut next = *tcp;
    for i in 0..3 {
        next.position[i] += a.delta[i];
        next.rpy[i] = wrap_angle(next.rpy[i] + a.delta[3 + i]);
    }
    match a.gripper {
        Some(GripperCommand::Open) => next.gripper = 1.0,
        Some(GripperCommand::Close) => next.gripper = 0.0,
        None => {}
    }
    next
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanActions {
    pub actions: Vec<EnvAction>,
    pub waypoints: Vec<Waypoint>,
    /// `false` when a waypoint hit the step cap; `actions` is then partial.
    pub reached: bool,
}

/// Converts a plan into env actions by tracking each waypoint under nominal
/// kinematics.
pub fn plan_to_actions(
    plan: &GuidancePlan,
    kps: &KeypointMap,
    tcp0: &TcpState,
    prim: &PrimitiveConfig,
    tracker: &TrackerConfig,
) -> PrimitiveResult<PlanActions> {
    tracker.validate()?;
    let waypoints = resolve_plan(plan, kps, tcp0, prim)?;
    let mut tcp = *tcp0;
    let mut actions = Vec::new();
    for wp in &waypoints {
        let mut steps = 0;
        while let Some(a) = track_step(&tcp, wp, tracker) {
            if steps == tracker.step_cap {
                return Ok(PlanActions { actions, waypoints, reached: false });
            }
            tcp = apply_nominal(&tcp, &a);
            actions.push(a);
            steps += 1;
        }
    }
    Ok(PlanActions { actions, waypoints, reached: true })
}
