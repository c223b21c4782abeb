use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Agent, AgentContext, AgentDecision, GuidanceScope, InterventionMode};
use crate::env::{task_keypoints, Task};
use crate::error::{Error, Result};
use crate::geometry::{bbox_from_keypoints, normalize_pixel, project, CameraModel, PixelKeypoint, SpatialConstraint, WorldPoint};
use crate::primitives::{GuidancePlan, KeypointMap, Primitive, PrimitiveCall, TcpState, Waypoint, WaypointKind};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Keypoint noise in metres at the keypoint depth.
    pub perception_noise_sigma: f64,
    pub keypoint_dropout_prob: f64,
    pub latency_steps: usize,
    /// Gaussian noise (m) on every motion waypoint. Zero for the agent.
    pub waypoint_noise_sigma: f64,
    /// Probability that a whole plan is mirrored about the TCP.
    pub wrong_direction_prob: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            perception_noise_sigma: 0.0005,
            keypoint_dropout_prob: 0.0,
            latency_steps: 0,
            waypoint_noise_sigma: 0.0,
            wrong_direction_prob: 0.0,
        }
    }
}

impl OracleConfig {
    /// Synthetic stand-in for a human teleoperator.
    pub fn scripted_hil() -> Self {
        OracleConfig {
            perception_noise_sigma: 0.0005,
            keypoint_dropout_prob: 0.0,
            latency_steps: 5,
            waypoint_noise_sigma: 0.01,
            wrong_direction_prob: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.perception_noise_sigma >= 0.0) || !(self.waypoint_noise_sigma >= 0.0) {
            return Err(Error::Config("oracle noise sigmas must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.keypoint_dropout_prob) && self.keypoint_dropout_prob != 1.0 {
            return Err(Error::Config("keypoint_dropout_prob must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.wrong_direction_prob) {
            return Err(Error::Config("wrong_direction_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scripted agent with access to ground truth.
#[derive(Debug, Clone)]
pub struct OracleAgent {
    pub cfg: OracleConfig,
    rng: ChaCha8Rng,
}

impl OracleAgent {
    pub fn new(cfg: OracleConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(OracleAgent { cfg, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    fn gauss(&mut self, sigma: f64) -> f64 {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).expect("finite sigma").sample(&mut self.rng)
        } else {
            0.0
        }
    }
}

fn call(p: Primitive, why: &str) -> PrimitiveCall {
    PrimitiveCall::new(p).with_analysis(why)
}

fn insertion_plan(ctx: &AgentContext<'_>, kps: &KeypointMap) -> Result<GuidancePlan> {
    let profile = ctx.profile;
    let socket = kps.get("socket").ok_or_else(|| Error::Aborted("socket keypoint missing".into()))?;
    let tcp = ctx.state.tcp.position;
    let mut calls = Vec::new();
    let clear_z = socket.z + profile.surface_offset + 0.005;
    if tcp.z < clear_z {
        calls.push(call(Primitive::Lift { height: clear_z + 0.01 - tcp.z }, "clear the fixture before moving sideways"));
    }
    calls.push(call(
        Primitive::MoveToPose { target: "above_socket".into(), rpy: Some([0.0, 0.0, 0.0]) },
        "move over the port with the connector upright",
    ));
    calls.push(call(Primitive::PreGrasp { target: "socket".into(), rpy: None }, "descend to just above the opening"));
    if profile.guidance_scope == GuidanceScope::FullTask {
        calls.push(call(Primitive::MoveToPose { target: "socket".into(), rpy: None }, "push the connector in"));
    }
    Ok(GuidancePlan::new(calls)?)
}

fn hanging_plan(kps: &KeypointMap) -> Result<GuidancePlan> {
    let hook = kps.get("hook").ok_or_else(|| Error::Aborted("hook keypoint missing".into()))?;
    let ring = kps.get("ring_kp").ok_or_else(|| Error::Aborted("ring_kp keypoint missing".into()))?;
    let mut calls = Vec::new();
    if ring.z <= hook.z + 0.005 {
        calls.push(call(Primitive::Lift { height: 0.05 }, "raise the knot above the hook tip"));
    }
    calls.push(call(Primitive::MoveToPose { target: "above_hook".into(), rpy: None }, "carry the knot over the hook"));
    calls.push(call(
        Primitive::MoveDelta { from: "ring_kp".into(), to: "hook".into() },
        "lower the loop onto the hook",
    ));
    calls.push(call(Primitive::Release, "let go once the loop is hooked"));
    Ok(GuidancePlan::new(calls)?)
}

impl Agent for OracleAgent {
    fn name(&self) -> &str {
        "oracle"
    }

    fn decide_mode(&mut self, ctx: &AgentContext<'_>) -> Result<AgentDecision> {
        let mode = ctx.profile.mode_for(ctx.subgoal);
        let reasoning = match mode {
            InterventionMode::ExplorationPruning => format!("phase `{}` needs fine alignment near the goal", ctx.subgoal.id),
            InterventionMode::ActionGuidance => format!("phase `{}` needs coarse repositioning", ctx.subgoal.id),
        };
        Ok(AgentDecision { mode, reasoning })
    }

    fn perceive(&mut self, ctx: &AgentContext<'_>, camera: &CameraModel) -> Result<Vec<PixelKeypoint>> {
        let fx = camera.intrinsics()[(0, 0)];
        let fy = camera.intrinsics()[(1, 1)];
        let mut out = Vec::new();
        for (name, p, _) in task_keypoints(ctx.env_cfg, ctx.state) {
            let (u, v, depth) = project(camera, &p)?;
            let sigma = self.cfg.perception_noise_sigma;
            let u = u + self.gauss(sigma * fx / depth);
            let v = v + self.gauss(sigma * fy / depth);
            let u = u.clamp(0.0, f64::from(camera.width));
            let v = v.clamp(0.0, f64::from(camera.height));
            if self.cfg.keypoint_dropout_prob > 0.0 && self.rng.gen::<f64>() < self.cfg.keypoint_dropout_prob {
                continue;
            }
            let (u_norm, v_norm) = normalize_pixel(u, v, camera.width, camera.height);
            out.push(PixelKeypoint {
                name: name.to_string(),
                u_norm,
                v_norm,
                confidence: 0.95,
                description: format!("{name} for {}", ctx.env_cfg.task.as_str()),
            });
        }
        if out.is_empty() {
            return Err(Error::PerceptionEmpty);
        }
        Ok(out)
    }

    fn gen_bbox(&mut self, ctx: &AgentContext<'_>, keypoints3d: &[WorldPoint]) -> Result<SpatialConstraint> {
        let goal_name = match ctx.profile.task {
            Task::Insertion => "socket",
            Task::Hanging => "hook",
        };
        let goal: Vec<WorldPoint> = keypoints3d.iter().filter(|w| w.name == goal_name).cloned().collect();
        let pts = if goal.is_empty() { keypoints3d } else { &goal[..] };
        Ok(bbox_from_keypoints(pts, ctx.profile.bbox_margins, ctx.profile.bbox_min_size, &ctx.profile.workspace)?)
    }

    fn gen_waypoints(&mut self, ctx: &AgentContext<'_>, keypoints: &KeypointMap) -> Result<GuidancePlan> {
        match ctx.profile.task {
            Task::Insertion => insertion_plan(ctx, keypoints),
            Task::Hanging => hanging_plan(keypoints),
        }
    }

    fn adjust_waypoints(&mut self, waypoints: &mut [Waypoint], tcp: &TcpState) {
        let mirror = self.cfg.wrong_direction_prob > 0.0 && self.rng.gen::<f64>() < self.cfg.wrong_direction_prob;
        let sigma = self.cfg.waypoint_noise_sigma;
        for wp in waypoints.iter_mut().filter(|w| w.kind == WaypointKind::Motion) {
            if mirror {
                wp.target.position = tcp.position * 2.0 - wp.target.position;
            }
            let noise = Vec3::new(self.gauss(sigma), self.gauss(sigma), self.gauss(sigma));
            wp.target.position += noise;
        }
    }

    fn latency_steps(&self) -> usize {
        self.cfg.latency_steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::Observation;
    use crate::env::{camera_for_state, observe, reset, EnvConfig, EnvState};
    use crate::geometry::{contains, denormalize_pixel, deproject};
    use crate::supervisor::{Subgoal, TaskProfile};

    struct Fixture {
        cfg: EnvConfig,
        profile: TaskProfile,
        state: EnvState,
        obs: Observation,
        subgoal: Subgoal,
    }

    impl Fixture {
        fn new(cfg: EnvConfig, seed: u64) -> Self {
            let state = reset(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let obs = observe(&state, &cfg);
            Fixture { profile: TaskProfile::for_env(&cfg), subgoal: state.phase.clone(), cfg, state, obs }
        }

        fn ctx(&self) -> AgentContext<'_> {
            AgentContext {
                env_cfg: &self.cfg,
                profile: &self.profile,
                state: &self.state,
                obs: &self.obs,
                subgoal: &self.subgoal,
            }
        }
    }

    fn exact() -> OracleConfig {
        OracleConfig { perception_noise_sigma: 0.0, ..OracleConfig::default() }
    }

    #[test]
    fn rule_table_examples() {
        let mut f = Fixture::new(EnvConfig::insertion(), 0);
        let mut agent = OracleAgent::new(exact(), 0).unwrap();
        f.subgoal = Subgoal::new("align_connector");
        assert_eq!(agent.decide_mode(&f.ctx()).unwrap().mode, InterventionMode::ExplorationPruning);
        f.subgoal = Subgoal::new("approach_socket");
        assert_eq!(agent.decide_mode(&f.ctx()).unwrap().mode, InterventionMode::ActionGuidance);
        let mut h = Fixture::new(EnvConfig::hanging(), 0);
        h.subgoal = Subgoal::new("approach_hook");
        assert_eq!(agent.decide_mode(&h.ctx()).unwrap().mode, InterventionMode::ActionGuidance);
    }

    #[test]
    fn exact_perception_recovers_socket() {
        let f = Fixture::new(EnvConfig::insertion(), 1);
        let mut agent = OracleAgent::new(exact(), 0).unwrap();
        let cam = camera_for_state(&f.cfg, &f.state);
        let kps = agent.perceive(&f.ctx(), &cam).unwrap();
        let socket = kps.iter().find(|k| k.name == "socket").unwrap();
        let (u, v) = denormalize_pixel(socket, cam.width, cam.height);
        let p = deproject(&cam, u, v).unwrap();
        assert!((p - f.state.goal_pose.position).norm() < 1e-6, "{p:?}");
    }

    #[test]
    fn full_dropout_is_empty() {
        let f = Fixture::new(EnvConfig::insertion(), 1);
        let mut agent = OracleAgent::new(OracleConfig { keypoint_dropout_prob: 1.0, ..exact() }, 0).unwrap();
        let cam = camera_for_state(&f.cfg, &f.state);
        assert!(matches!(agent.perceive(&f.ctx(), &cam), Err(Error::PerceptionEmpty)));
    }

    #[test]
    fn insertion_bbox_size() {
        let f = Fixture::new(EnvConfig::insertion(), 0);
        let mut agent = OracleAgent::new(exact(), 0).unwrap();
        let b = agent.gen_bbox(&f.ctx(), &[WorldPoint::new("socket", f.cfg.goal)]).unwrap();
        let want = (f.profile.bbox_margins * 2.0).sup(&f.profile.bbox_min_size);
        assert!((b.size - want).norm() < 1e-12, "{:?}", b.size);
        assert!(contains(&b, &f.cfg.goal));
    }

    #[test]
    fn hanging_plan_shape() {
        let f = Fixture::new(EnvConfig::hanging(), 0);
        let mut agent = OracleAgent::new(exact(), 0).unwrap();
        let mut kps = KeypointMap::new();
        for (n, p, attached) in task_keypoints(&f.cfg, &f.state) {
            if attached {
                kps.insert_attached(n, p);
            } else {
                kps.insert(n, p);
            }
        }
        let plan = agent.gen_waypoints(&f.ctx(), &kps).unwrap();
        let names: Vec<&str> = plan.calls.iter().map(|c| c.name()).collect();
        assert_eq!(names, ["lift", "move_to_pose", "move_delta", "release"]);
        assert_eq!(plan.calls[0].primitive, Primitive::Lift { height: 0.05 });
    }
}
