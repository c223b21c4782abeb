//! The training loop: deviation monitoring, agent interventions, learner
//! scheduling, evaluation and metrics.
//!
//! A run alternates environment interaction with learner updates. Every
//! `eval_stride` control steps the embedded rollout prefix is scored against
//! the expert demos; above the threshold the agent is consulted and either
//! drives the robot with a waypoint plan or installs a box that masks
//! exploration. Interventions freeze the simulated world while the agent
//! "thinks", so they cost wall-clock time but no env steps.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoding::{Embedding, Encoder, Observation};
use crate::env::{
    camera_for_state, generate_demos, observation_dim, observe, reset, standardization, step, task_keypoints,
    DemoSet, EnvAction, EnvConfig, EnvState, StepResult,
};
use crate::error::{Error, Result};
use crate::geometry::{contains, denormalize_pixel, deproject, SpatialConstraint, WorldPoint};
use crate::ot::{calibrate_threshold, float_index, should_trigger, DetectorConfig, EmbeddedTrajectory};
use crate::primitives::{resolve_plan, track_step, KeypointMap, TrackerConfig, Waypoint, WaypointKind};
use crate::rl::{sample_batch, ActMode, Losses, Policy, ReplayBuffer, Sac, Source, SuccessRecord, TrainConfig, Transition};
use crate::supervisor::{
    Agent, AgentContext, EpisodicMemory, FallbackPolicy, GuidanceScope, InterventionMode, OracleAgent, OracleConfig,
    RemoteAgent, RemoteConfig, Subgoal, TaskProfile,
};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Oracle,
    Remote,
    None,
}

impl std::str::FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(AgentKind::Oracle),
            "remote" => Ok(AgentKind::Remote),
            "none" => Ok(AgentKind::None),
            other => Err(Error::Config(format!("unknown agent kind `{other}` (oracle, remote, none)"))),
        }
    }
}

/// How long an installed box stays in force.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxPersistence {
    Episode,
    Training,
}

/// What happens when perception finds nothing, even after one retry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptionFallback {
    /// Guide with the last keypoints that were seen, if any.
    Guidance,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub agent: AgentKind,
    pub oracle: OracleConfig,
    pub remote: RemoteConfig,
    pub guidance: bool,
    pub pruning: bool,
    pub memory: bool,
    /// Consecutive failures that evict a memory entry.
    pub memory_invalidation_limit: u32,
    pub bbox_persistence: BoxPersistence,
    /// Evenly spaced evaluation checkpoints over the budget; the last one
    /// lands on the budget.
    pub eval_checkpoints: usize,
    pub eval_episodes: usize,
    pub budget_steps: usize,
    pub seed: u64,
    /// Expert demos generated when none are supplied.
    pub n_demos: usize,
    pub embedding_dim: usize,
    /// Constant feature appended before the projection.
    pub embedding_bias: f64,
    /// Prefixes and demos are uniformly subsampled to at most this many frames
    /// before scoring.
    pub float_max_frames: usize,
    pub threshold_refresh_every: usize,
    pub threshold_min_successes: usize,
    /// Fixed threshold; disables bootstrap and refresh.
    pub threshold_override: Option<f64>,
    pub perception_fallback: PerceptionFallback,
    pub guidance_scope: Option<GuidanceScope>,
    pub tracker: TrackerConfig,
    /// Store the policy's proposed action instead of the clipped one for
    /// steps taken under a box.
    pub store_proposed_action: bool,
    /// Simulated seconds charged per fresh agent query.
    pub agent_call_seconds: f64,
    pub single_threaded: bool,
    /// Learner updates between policy snapshots in threaded mode.
    pub publish_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_env(EnvConfig::insertion())
    }
}

impl RunConfig {
    pub fn for_env(env: EnvConfig) -> Self {
        RunConfig {
            env,
            detector: DetectorConfig::default(),
            train: TrainConfig::default(),
            agent: AgentKind::Oracle,
            oracle: OracleConfig::default(),
            remote: RemoteConfig::default(),
            guidance: true,
            pruning: true,
            memory: true,
            memory_invalidation_limit: 3,
            bbox_persistence: BoxPersistence::Training,
            eval_checkpoints: 4,
            eval_episodes: 10,
            budget_steps: 30_000,
            seed: 0,
            n_demos: 20,
            embedding_dim: 32,
            embedding_bias: 1.0,
            float_max_frames: 16,
            threshold_refresh_every: 20,
            threshold_min_successes: 5,
            threshold_override: None,
            perception_fallback: PerceptionFallback::Guidance,
            guidance_scope: None,
            tracker: TrackerConfig { tol: 0.001, ..TrackerConfig::default() },
            store_proposed_action: true,
            agent_call_seconds: 2.0,
            single_threaded: true,
            publish_every: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget_steps == 0 {
            return Err(Error::Config("budget_steps must be > 0".into()));
        }
        if self.eval_checkpoints == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("eval_checkpoints and eval_episodes must be > 0".into()));
        }
        if self.n_demos == 0 {
            return Err(Error::Config("n_demos must be > 0".into()));
        }
        if self.float_max_frames < 2 {
            return Err(Error::Config("float_max_frames must be >= 2".into()));
        }
        if self.detector.eval_stride == 0 || self.threshold_refresh_every == 0 {
            return Err(Error::Config("eval_stride and threshold_refresh_every must be > 0".into()));
        }
        self.env.validate()?;
        self.train.validate()?;
        self.oracle.validate()?;
        self.tracker.validate()?;
        Ok(())
    }

    /// Whether any intervention branch is reachable.
    pub fn interventions_enabled(&self) -> bool {
        self.agent != AgentKind::None && (self.guidance || self.pruning)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("run config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn profile(&self) -> TaskProfile {
        let mut p = TaskProfile::for_env(&self.env);
        if let Some(scope) = self.guidance_scope {
            p.guidance_scope = scope;
        }
        p
    }

    /// Env steps at which checkpoints are evaluated.
    pub fn checkpoint_steps(&self) -> Vec<usize> {
        let n = self.eval_checkpoints;
        let mut v: Vec<usize> = (1..=n).map(|k| (self.budget_steps * k / n).max(1)).collect();
        v.dedup();
        v
    }
}

/// Independent RNG stream `k` of a run seed.
pub fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k.wrapping_mul(0xD1B5_4A32_D192_ED03)))
}

const STREAM_ENV: u64 = 1;
const STREAM_ACT: u64 = 2;
const STREAM_LEARN: u64 = 3;
const STREAM_DEMO: u64 = 4;
const STREAM_AGENT: u64 = 5;
const STREAM_EVAL: u64 = 6;
const STREAM_INIT: u64 = 7;
const STREAM_ENCODER: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub env_steps: usize,
    pub episode: usize,
    pub wall_clock_s: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSample {
    pub env_steps: usize,
    pub episode: usize,
    pub t: usize,
    pub lambda: f64,
    pub threshold: f64,
}

/// One audit line per trigger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub env_steps: usize,
    pub episode: usize,
    pub t: usize,
    pub lambda: f64,
    pub threshold: f64,
    pub mode: Option<InterventionMode>,
    pub subgoal: String,
    pub memory_hit: bool,
    pub fresh_call: bool,
    /// `guided`, `pruned`, `skipped`, `fallback` or `aborted`.
    pub outcome: String,
    pub guidance_steps: usize,
    /// SHA-256 of the agent payloads exchanged for this trigger.
    pub payload_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// Env steps consumed when the episode ended.
    pub env_steps: usize,
    pub wall_clock_s: f64,
    pub steps: usize,
    pub success: bool,
    pub triggers: usize,
    pub guidance_steps: usize,
    pub lambda_max: Option<f64>,
    pub threshold: f64,
    pub losses: Option<Losses>,
    pub alpha: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentCalls {
    pub decide_mode: usize,
    pub perceive: usize,
    pub bbox: usize,
    pub waypoints: usize,
    /// Pruning triggers answered from memory.
    pub memory_hits: usize,
    /// Pruning triggers that needed a fresh box from the agent.
    pub fresh_pruning: usize,
    /// Failed remote calls answered by the scripted oracle.
    pub fallbacks: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config_hash: String,
    pub checkpoints: Vec<CheckpointEval>,
    pub lambda_series: Vec<LambdaSample>,
    pub triggers: Vec<TriggerEvent>,
    pub episodes: Vec<EpisodeRecord>,
    pub agent_calls: AgentCalls,
    /// Pruning triggers per subgoal id.
    pub pruning_triggers_by_subgoal: BTreeMap<String, usize>,
    /// `(episode, threshold)` each time the threshold changes.
    pub threshold_history: Vec<(usize, f64)>,
    pub env_steps: usize,
    pub updates: u64,
    pub wall_clock_s: f64,
    /// Steps executed under a box, and how many left it.
    pub constrained_steps: usize,
    pub constraint_violations: usize,
    pub aborted: Option<String>,
}

impl RunMetrics {
    pub fn final_success_rate(&self) -> Option<f64> {
        self.checkpoints.last().map(|c| c.success_rate)
    }

    /// Trigger counts over consecutive blocks of 10 training episodes; a
    /// trailing partial block is included.
    pub fn triggers_per_10(&self) -> Vec<usize> {
        self.episodes.chunks(10).map(|c| c.iter().map(|e| e.triggers).sum()).collect()
    }

    /// Triggers over the last `n` training episodes.
    pub fn triggers_in_last(&self, n: usize) -> usize {
        self.episodes.iter().rev().take(n).map(|e| e.triggers).sum()
    }

    /// Episode and checkpoint rows. Floats use shortest round-trip formatting
    /// so identical runs give identical bytes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "kind,episode,env_steps,wall_clock_s,steps,success,triggers,guidance_steps,lambda_max,threshold,critic_loss,actor_loss,alpha,eval_success\n",
        );
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut ck = self.checkpoints.iter().peekable();
        for e in &self.episodes {
            while let Some(c) = ck.next_if(|c| c.env_steps <= e.env_steps && c.episode <= e.episode) {
                s.push_str(&format!(
                    "eval,{},{},{},,,,,,,,,,{}\n",
                    c.episode, c.env_steps, c.wall_clock_s, c.success_rate
                ));
            }
            s.push_str(&format!(
                "episode,{},{},{},{},{},{},{},{},{},{},{},{},\n",
                e.episode,
                e.env_steps,
                e.wall_clock_s,
                e.steps,
                u8::from(e.success),
                e.triggers,
                e.guidance_steps,
                opt(e.lambda_max),
                e.threshold,
                opt(e.losses.map(|l| l.critic)),
                opt(e.losses.map(|l| l.actor)),
                e.alpha
            ));
        }
        for c in ck {
            s.push_str(&format!("eval,{},{},{},,,,,,,,,,{}\n", c.episode, c.env_steps, c.wall_clock_s, c.success_rate));
        }
        s
    }

    /// One JSON object per line, one line per trigger.
    pub fn audit_jsonl(&self) -> String {
        self.triggers.iter().map(|t| serde_json::to_string(t).expect("audit record serialises") + "\n").collect()
    }
}

/// Final learner state plus metrics.
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub sac: Sac,
}

/// Anything that maps a state to an env action; used by evaluation.
pub trait Controller {
    fn begin_episode(&mut self, _state: &EnvState, _cfg: &EnvConfig) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, state: &EnvState, obs: &Observation, cfg: &EnvConfig) -> Result<EnvAction>;
}

/// Deterministic policy mean, no constraint.
pub struct PolicyController<'a> {
    pub policy: &'a Policy,
}

impl Controller for PolicyController<'_> {
    fn act(&mut self, state: &EnvState, obs: &Observation, _cfg: &EnvConfig) -> Result<EnvAction> {
        // Deterministic mode never draws from the RNG.
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        Ok(self.policy.act(obs, None, &state.tcp.position, ActMode::Deterministic, &mut unused)?)
    }
}

/// The scripted expert as a controller.
pub struct ExpertController;

impl Controller for ExpertController {
    fn act(&mut self, state: &EnvState, _obs: &Observation, cfg: &EnvConfig) -> Result<EnvAction> {
        Ok(crate::env::expert_action(state, cfg))
    }
}

/// Fraction of `n` episodes the controller solves. Episodes are drawn from a
/// fixed stream of `seed`, so repeated calls see the same start states.
pub fn evaluate_controller(ctrl: &mut dyn Controller, cfg: &EnvConfig, n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut rng = stream(seed, STREAM_EVAL);
    let mut wins = 0;
    for _ in 0..n {
        let mut state = reset(cfg, &mut rng);
        ctrl.begin_episode(&state, cfg)?;
        loop {
            let obs = observe(&state, cfg);
            let a = ctrl.act(&state, &obs, cfg)?.clipped(&cfg.action_limit);
            let res = step(&state, &a, cfg, &mut rng)?;
            state = res.next;
            if res.done {
                wins += usize::from(res.success);
                break;
            }
        }
    }
    Ok(wins as f64 / n as f64)
}

/// Deterministic policy, no interventions, no constraints.
pub fn evaluate(policy: &Policy, cfg: &EnvConfig, n: usize, seed: u64) -> Result<f64> {
    evaluate_controller(&mut PolicyController { policy }, cfg, n, seed)
}

/// Up to `max` frames at uniformly spread indices, first and last kept.
pub fn subsample<T: Clone>(xs: &[T], max: usize) -> Vec<T> {
    let n = xs.len();
    if n <= max || max < 2 {
        return xs.to_vec();
    }
    (0..max).map(|i| xs[(i * (n - 1) + (max - 1) / 2) / (max - 1)].clone()).collect()
}

/// Encoder and expert set used by the deviation monitor.
#[derive(Debug, Clone)]
pub struct Monitor {
    pub encoder: Encoder,
    pub experts: Vec<EmbeddedTrajectory>,
    pub detector: DetectorConfig,
    pub max_frames: usize,
}

impl Monitor {
    pub fn new(cfg: &RunConfig, demos: &DemoSet) -> Result<Self> {
        let env = &cfg.env;
        let enc_seed = rand::Rng::gen::<u64>(&mut stream(cfg.seed, STREAM_ENCODER));
        let encoder = Encoder::new(
            enc_seed,
            observation_dim(env),
            cfg.embedding_dim,
            Some(standardization(env, cfg.embedding_bias)),
        )?;
        let mut experts = Vec::with_capacity(demos.len());
        for ep in &demos.episodes {
            let embs = ep.observations(env).iter().map(|o| encoder.encode(o)).collect::<Result<Vec<_>>>()?;
            experts.push(EmbeddedTrajectory::new(format!("demo-{}", ep.id), subsample(&embs, cfg.float_max_frames))?);
        }
        if experts.is_empty() {
            return Err(Error::Config("deviation monitor needs at least one demo".into()));
        }
        Ok(Monitor { encoder, experts, detector: cfg.detector.clone(), max_frames: cfg.float_max_frames })
    }

    pub fn encode(&self, obs: &Observation) -> Result<Embedding> {
        self.encoder.encode(obs)
    }

    /// Deviation of a prefix against all experts (or all but `skip`).
    pub fn lambda(&self, prefix: &[Embedding], skip: Option<usize>) -> Result<f64> {
        let traj = EmbeddedTrajectory::new("rollout", subsample(prefix, self.max_frames))?;
        let detector = DetectorConfig { min_prefix: 1, ..self.detector.clone() };
        let idx = match skip {
            None => float_index(&traj, &self.experts, &detector)?,
            Some(k) => {
                let others: Vec<EmbeddedTrajectory> =
                    self.experts.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, e)| e.clone()).collect();
                float_index(&traj, &others, &detector)?
            }
        };
        Ok(idx.value)
    }

    /// Largest deviation over stride prefixes and the full trajectory; the
    /// per-episode statistic the threshold is calibrated on.
    pub fn episode_lambda(&self, embs: &[Embedding], skip: Option<usize>) -> Result<f64> {
        let stride = self.detector.eval_stride;
        let min = self.detector.min_prefix.max(1);
        let mut best: Option<f64> = None;
        let mut ends: Vec<usize> = (1..embs.len()).filter(|t| t % stride == 0).map(|t| t + 1).collect();
        ends.push(embs.len());
        for end in ends.into_iter().filter(|&e| e >= min) {
            let l = self.lambda(&embs[..end], skip)?;
            best = Some(best.map_or(l, |b: f64| b.max(l)));
        }
        best.ok_or_else(|| Error::Config("trajectory shorter than min_prefix".into()))
    }

    /// Leave-one-out threshold from the demos themselves.
    pub fn bootstrap_threshold(&self, demos: &DemoSet, env: &EnvConfig) -> Result<f64> {
        if demos.len() < 2 {
            return Err(Error::Config("leave-one-out threshold needs at least 2 demos".into()));
        }
        let mut values = Vec::with_capacity(demos.len());
        for (k, ep) in demos.episodes.iter().enumerate() {
            let embs = ep.observations(env).iter().map(|o| self.encode(o)).collect::<Result<Vec<_>>>()?;
            values.push(self.episode_lambda(&embs, Some(k))?);
        }
        Ok(calibrate_threshold(&values, &self.detector)?)
    }
}

/// Learner side of the loop as seen by the interaction code.
pub trait LearnerPort {
    fn policy(&self) -> &Policy;
    /// Picks up the latest published weights, if the learner runs elsewhere.
    fn refresh(&mut self) {}
    fn push(&mut self, t: Transition);
    /// Called once per consumed env step.
    fn after_env_step(&mut self, env_steps: usize) -> Result<()>;
    fn next_seq(&self) -> u64;
    fn record_success(&mut self, rec: SuccessRecord);
    fn success_indices(&self) -> Vec<f64>;
    fn last_losses(&self) -> Option<Losses>;
    fn alpha(&self) -> f64;
    fn updates(&self) -> u64;
}

/// Learner updated in-line, strictly one env step then `utd_ratio` updates.
pub struct InlineLearner {
    pub sac: Sac,
    pub demo: ReplayBuffer,
    pub online: ReplayBuffer,
    rng: ChaCha8Rng,
    losses: Option<Losses>,
    mirror: bool,
}

impl InlineLearner {
    pub fn new(sac: Sac, demo: ReplayBuffer, rng: ChaCha8Rng) -> Self {
        let cap = sac.cfg.buffer_capacity;
        let mirror = sac.cfg.mirror_guidance_to_demo;
        InlineLearner { sac, demo, online: ReplayBuffer::new(cap), rng, losses: None, mirror }
    }
}

impl LearnerPort for InlineLearner {
    fn policy(&self) -> &Policy {
        &self.sac.policy
    }

    fn push(&mut self, t: Transition) {
        if self.mirror && t.source == Source::Guidance {
            self.demo.push(t.clone());
        }
        self.online.push(t);
    }

    fn after_env_step(&mut self, _env_steps: usize) -> Result<()> {
        let (min_buffer, batch_size, utd) = (self.sac.cfg.min_buffer, self.sac.cfg.batch_size, self.sac.cfg.utd_ratio);
        if self.online.len() < min_buffer.max(1) {
            return Ok(());
        }
        for _ in 0..utd {
            let batch = sample_batch(&self.demo, &self.online, batch_size, min_buffer, &mut self.rng)?;
            self.losses = Some(self.sac.update(&batch, &mut self.rng)?);
        }
        Ok(())
    }

    fn next_seq(&self) -> u64 {
        self.online.next_seq()
    }

    fn record_success(&mut self, rec: SuccessRecord) {
        self.online.record_success(rec);
    }

    fn success_indices(&self) -> Vec<f64> {
        self.online.successes().map(|s| s.float_index).collect()
    }

    fn last_losses(&self) -> Option<Losses> {
        self.losses
    }

    fn alpha(&self) -> f64 {
        self.sac.alpha()
    }

    fn updates(&self) -> u64 {
        self.sac.updates
    }
}

/// State shared between the interaction loop and a learner thread.
struct SharedLearner {
    online: Mutex<ReplayBuffer>,
    demo: Mutex<ReplayBuffer>,
    snapshot: Mutex<Arc<Policy>>,
    losses: Mutex<Option<(Losses, f64)>>,
    env_steps: AtomicUsize,
    updates: AtomicU64,
    stop: AtomicBool,
    error: Mutex<Option<String>>,
}

/// Interaction-side handle of a learner running on its own thread.
struct ThreadedPort {
    shared: Arc<SharedLearner>,
    policy: Arc<Policy>,
    mirror: bool,
    init_alpha: f64,
}

impl LearnerPort for ThreadedPort {
    fn policy(&self) -> &Policy {
        &self.policy
    }

    fn refresh(&mut self) {
        self.policy = self.shared.snapshot.lock().expect("snapshot lock").clone();
    }

    fn push(&mut self, t: Transition) {
        if self.mirror && t.source == Source::Guidance {
            self.shared.demo.lock().expect("demo lock").push(t.clone());
        }
        self.shared.online.lock().expect("buffer lock").push(t);
    }

    fn after_env_step(&mut self, env_steps: usize) -> Result<()> {
        self.shared.env_steps.store(env_steps, Ordering::Release);
        if let Some(e) = self.shared.error.lock().expect("error lock").clone() {
            return Err(Error::Aborted(format!("learner failed: {e}")));
        }
        Ok(())
    }

    fn next_seq(&self) -> u64 {
        self.shared.online.lock().expect("buffer lock").next_seq()
    }

    fn record_success(&mut self, rec: SuccessRecord) {
        self.shared.online.lock().expect("buffer lock").record_success(rec);
    }

    fn success_indices(&self) -> Vec<f64> {
        self.shared.online.lock().expect("buffer lock").successes().map(|s| s.float_index).collect()
    }

    fn last_losses(&self) -> Option<Losses> {
        self.shared.losses.lock().expect("loss lock").map(|(l, _)| l)
    }

    fn alpha(&self) -> f64 {
        self.shared.losses.lock().expect("loss lock").map_or(self.init_alpha, |(_, a)| a)
    }

    fn updates(&self) -> u64 {
        self.shared.updates.load(Ordering::Acquire)
    }
}

/// Learner thread body: keeps updates at or below `utd * env_steps`.
fn learner_loop(shared: &SharedLearner, mut sac: Sac, mut rng: ChaCha8Rng, publish_every: u64) -> Sac {
    let cfg = sac.cfg.clone();
    loop {
        let stop = shared.stop.load(Ordering::Acquire);
        let allowed = (shared.env_steps.load(Ordering::Acquire) * cfg.utd_ratio) as u64;
        let ready = shared.online.lock().expect("buffer lock").len() >= cfg.min_buffer.max(1);
        if !ready || sac.updates >= allowed {
            if stop {
                break;
            }
            std::thread::sleep(Duration::from_micros(200));
            continue;
        }
        let batch = {
            let online = shared.online.lock().expect("buffer lock");
            let demo = shared.demo.lock().expect("demo lock");
            sample_batch(&demo, &online, cfg.batch_size, cfg.min_buffer, &mut rng)
        };
        let res = batch.and_then(|b| sac.update(&b, &mut rng));
        match res {
            Ok(l) => {
                *shared.losses.lock().expect("loss lock") = Some((l, sac.alpha()));
                shared.updates.store(sac.updates, Ordering::Release);
                if sac.updates % publish_every.max(1) == 0 {
                    *shared.snapshot.lock().expect("snapshot lock") = Arc::new(sac.policy.clone());
                }
            }
            Err(e) => {
                *shared.error.lock().expect("error lock") = Some(e.to_string());
                break;
            }
        }
    }
    *shared.snapshot.lock().expect("snapshot lock") = Arc::new(sac.policy.clone());
    sac
}

/// Answers an agent call, substituting the scripted oracle for failed remote
/// calls when the fallback policy allows it.
fn call_agent<T>(
    agent: &mut dyn Agent,
    fallback: &mut OracleAgent,
    on_failure: Option<FallbackPolicy>,
    calls: &mut AgentCalls,
    f: impl Fn(&mut dyn Agent) -> Result<T>,
) -> Result<T> {
    match f(agent) {
        Err(Error::Protocol(e)) => match on_failure {
            Some(FallbackPolicy::Fallback) => {
                calls.fallbacks += 1;
                f(fallback)
            }
            Some(FallbackPolicy::Abort) => Err(Error::Aborted(format!("agent protocol failure: {e}"))),
            None => Err(Error::Protocol(e)),
        },
        r => r,
    }
}

fn digest(parts: &[String]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// What one call to [`Session::interaction_step`] did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    /// Deviation computed at this step, if it was a stride step.
    pub lambda: Option<f64>,
    pub triggered: bool,
    pub mode: Option<InterventionMode>,
    /// Env steps executed, including guidance and box-entry moves.
    pub env_steps: usize,
    pub done: bool,
    pub success: bool,
}

struct EpisodeState {
    index: usize,
    state: EnvState,
    prefix: Vec<Embedding>,
    t: usize,
    cooldown_until: usize,
    triggers: usize,
    guidance_steps: usize,
    lambda_max: Option<f64>,
    first_seq: u64,
    /// Boxes in force at some point this episode, by subgoal.
    used_boxes: BTreeMap<String, SpatialConstraint>,
    done: bool,
    success: bool,
}

/// Interaction-side state of a run: env, monitor, memory and agent.
pub struct Session {
    pub cfg: RunConfig,
    pub profile: TaskProfile,
    pub monitor: Option<Monitor>,
    pub memory: EpisodicMemory,
    pub threshold: f64,
    pub active_box: Option<(Subgoal, SpatialConstraint)>,
    pub metrics: RunMetrics,
    agent: Option<Box<dyn Agent>>,
    fallback: OracleAgent,
    env_rng: ChaCha8Rng,
    act_rng: ChaCha8Rng,
    last_keypoints: Option<KeypointMap>,
    checkpoints: Vec<usize>,
    episode: Option<EpisodeState>,
    episodes_done: usize,
}

impl Session {
    /// `agent` overrides the one `cfg.agent` would build.
    pub fn new(cfg: RunConfig, demos: &DemoSet, agent: Option<Box<dyn Agent>>) -> Result<Self> {
        cfg.validate()?;
        let agent: Option<Box<dyn Agent>> = match (agent, cfg.agent) {
            (Some(a), _) => Some(a),
            (None, AgentKind::Oracle) => Some(Box::new(OracleAgent::new(cfg.oracle, stream(cfg.seed, STREAM_AGENT).gen_seed())?)),
            (None, AgentKind::Remote) => Some(Box::new(RemoteAgent::new(cfg.remote.clone()))),
            (None, AgentKind::None) => None,
        };
        let enabled = cfg.interventions_enabled() && agent.is_some();
        let monitor = if enabled { Some(Monitor::new(&cfg, demos)?) } else { None };
        let threshold = match (cfg.threshold_override, &monitor) {
            (Some(t), _) => t,
            (None, Some(m)) => m.bootstrap_threshold(demos, &cfg.env)?,
            (None, None) => f64::INFINITY,
        };
        let mut metrics = RunMetrics { config_hash: cfg.fingerprint(), ..RunMetrics::default() };
        if monitor.is_some() {
            metrics.threshold_history.push((0, threshold));
        }
        Ok(Session {
            profile: cfg.profile(),
            memory: EpisodicMemory::new(cfg.memory_invalidation_limit),
            fallback: OracleAgent::new(cfg.oracle, stream(cfg.seed, STREAM_AGENT).gen_seed() ^ 1)?,
            env_rng: stream(cfg.seed, STREAM_ENV),
            act_rng: stream(cfg.seed, STREAM_ACT),
            checkpoints: cfg.checkpoint_steps(),
            threshold,
            monitor,
            agent,
            metrics,
            active_box: None,
            last_keypoints: None,
            episode: None,
            episodes_done: 0,
            cfg,
        })
    }

    pub fn budget_left(&self) -> bool {
        self.metrics.env_steps < self.cfg.budget_steps && self.metrics.aborted.is_none()
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.episode.as_ref().map(|e| &e.state)
    }

    /// Starts a fresh episode.
    pub fn begin_episode(&mut self, learner: &mut impl LearnerPort) -> Result<()> {
        learner.refresh();
        let state = reset(&self.cfg.env, &mut self.env_rng);
        let prefix = match &self.monitor {
            Some(m) => vec![m.encode(&observe(&state, &self.cfg.env))?],
            None => Vec::new(),
        };
        if self.cfg.bbox_persistence == BoxPersistence::Episode {
            self.active_box = None;
        }
        self.episode = Some(EpisodeState {
            index: self.episodes_done,
            state,
            prefix,
            t: 0,
            cooldown_until: 0,
            triggers: 0,
            guidance_steps: 0,
            lambda_max: None,
            first_seq: learner.next_seq(),
            used_boxes: BTreeMap::new(),
            done: false,
            success: false,
        });
        Ok(())
    }

    /// Monitor check at stride steps, intervention if triggered, then one
    /// policy step unless the intervention ended the episode.
    pub fn interaction_step(&mut self, learner: &mut impl LearnerPort) -> Result<StepReport> {
        let mut report = StepReport::default();
        let (t, cooldown, plen) = {
            let ep = self.episode.as_ref().ok_or_else(|| Error::Config("no episode in progress".into()))?;
            (ep.t, ep.cooldown_until, ep.prefix.len())
        };
        let stride = self.cfg.detector.eval_stride;
        if let Some(m) = &self.monitor {
            if t > 0 && t % stride == 0 && t >= cooldown && plen >= self.cfg.detector.min_prefix.max(1) {
                let ep = self.episode.as_mut().expect("episode present");
                let lambda = m.lambda(&ep.prefix, None)?;
                ep.lambda_max = Some(ep.lambda_max.map_or(lambda, |x| x.max(lambda)));
                self.metrics.lambda_series.push(LambdaSample {
                    env_steps: self.metrics.env_steps,
                    episode: ep.index,
                    t,
                    lambda,
                    threshold: self.threshold,
                });
                report.lambda = Some(lambda);
                if should_trigger(lambda, self.threshold) {
                    report.triggered = true;
                    let before = self.metrics.env_steps;
                    report.mode = self.intervene(lambda, learner)?;
                    report.env_steps += self.metrics.env_steps - before;
                }
            }
        }
        let ep = self.episode.as_ref().expect("episode present");
        if !ep.done && self.budget_left() {
            self.policy_step(learner)?;
            report.env_steps += 1;
        }
        let ep = self.episode.as_ref().expect("episode present");
        report.done = ep.done || !self.budget_left();
        report.success = ep.success;
        Ok(report)
    }

    fn engaged_box(&self, tcp: &Vec3) -> Option<SpatialConstraint> {
        self.active_box.as_ref().map(|(_, b)| *b).filter(|b| contains(b, tcp))
    }

    fn policy_step(&mut self, learner: &mut impl LearnerPort) -> Result<()> {
        let ep = self.episode.as_ref().expect("episode present");
        let state = ep.state.clone();
        let obs = observe(&state, &self.cfg.env);
        let tcp = state.tcp.position;
        let policy = learner.policy();
        let proposed = policy.act_normalized(&obs.flat(), ActMode::Stochastic, &mut self.act_rng);
        let mut delta = [0.0; 6];
        for j in 0..6 {
            delta[j] = proposed[j] * policy.action_limit[j];
        }
        let engaged = self.engaged_box(&tcp);
        if let Some(b) = &engaged {
            delta = crate::geometry::clamp_action_to_box(&tcp, &delta, b)?;
            self.metrics.constrained_steps += 1;
            if !contains(b, &(tcp + Vec3::new(delta[0], delta[1], delta[2]))) {
                self.metrics.constraint_violations += 1;
            }
        }
        let action = EnvAction { delta, gripper: None };
        let stored = if engaged.is_some() && self.cfg.store_proposed_action {
            proposed
        } else {
            policy.normalize_action(&delta)
        };
        self.execute(learner, &action, stored, Source::Policy)?;
        Ok(())
    }

    /// Steps the env, stores the transition, feeds the learner and runs
    /// any checkpoint evaluation that falls due.
    fn execute(
        &mut self,
        learner: &mut impl LearnerPort,
        action: &EnvAction,
        stored: [f64; 6],
        source: Source,
    ) -> Result<StepResult> {
        let env = &self.cfg.env;
        let ep = self.episode.as_mut().expect("episode present");
        let res = step(&ep.state, action, env, &mut self.env_rng)?;
        let obs = observe(&ep.state, env);
        let next_obs = observe(&res.next, env);
        if let Some(m) = &self.monitor {
            ep.prefix.push(m.encode(&next_obs)?);
        }
        learner.push(Transition {
            obs: obs.flat(),
            action: stored,
            reward: res.reward,
            next_obs: next_obs.flat(),
            // Horizon truncation is not terminal.
            done: res.success,
            success: res.success,
            source,
        });
        if let Some(b) = self.active_box.as_ref().filter(|(_, b)| contains(b, &res.next.tcp.position)) {
            ep.used_boxes.insert(b.0.id.clone(), b.1);
        }
        ep.state = res.next.clone();
        ep.t += 1;
        ep.done = res.done;
        ep.success = res.success;
        if source == Source::Guidance {
            ep.guidance_steps += 1;
        }
        self.metrics.env_steps += 1;
        self.metrics.wall_clock_s += env.control_period();
        learner.after_env_step(self.metrics.env_steps)?;
        if self.checkpoints.first() == Some(&self.metrics.env_steps) {
            self.checkpoints.remove(0);
            let rate = evaluate(learner.policy(), env, self.cfg.eval_episodes, self.cfg.seed)?;
            self.metrics.checkpoints.push(CheckpointEval {
                env_steps: self.metrics.env_steps,
                episode: self.episodes_done,
                wall_clock_s: self.metrics.wall_clock_s,
                success_rate: rate,
            });
        }
        Ok(res)
    }

    fn context_parts(&self) -> (EnvState, Observation, Subgoal) {
        let ep = self.episode.as_ref().expect("episode present");
        let obs = observe(&ep.state, &self.cfg.env);
        (ep.state.clone(), obs, ep.state.phase.clone())
    }

    fn on_failure(&self) -> Option<FallbackPolicy> {
        (self.cfg.agent == AgentKind::Remote).then_some(self.cfg.remote.on_failure)
    }

    /// Keypoints in the world frame; one retry on an empty answer.
    fn perceive_world(&mut self, payloads: &mut Vec<String>) -> Result<Vec<(WorldPoint, bool)>> {
        let (state, obs, subgoal) = self.context_parts();
        let cam = camera_for_state(&self.cfg.env, &state);
        let ctx = AgentContext { env_cfg: &self.cfg.env, profile: &self.profile, state: &state, obs: &obs, subgoal: &subgoal };
        let on_failure = self.on_failure();
        let agent = self.agent.as_deref_mut().expect("agent present");
        let mut attempt = 0;
        let kps = loop {
            self.metrics.agent_calls.perceive += 1;
            match call_agent(agent, &mut self.fallback, on_failure, &mut self.metrics.agent_calls, |a| a.perceive(&ctx, &cam)) {
                Ok(k) if !k.is_empty() => break k,
                Ok(_) | Err(Error::PerceptionEmpty) if attempt == 0 => attempt += 1,
                Ok(_) => return Err(Error::PerceptionEmpty),
                Err(e) => return Err(e),
            }
        };
        payloads.push(crate::supervisor::wire::encode_keypoints(&kps));
        let attached: Vec<&str> =
            task_keypoints(&self.cfg.env, &state).into_iter().filter(|k| k.2).map(|k| k.0).collect();
        let mut out = Vec::with_capacity(kps.len());
        for kp in &kps {
            let (u, v) = denormalize_pixel(kp, cam.width, cam.height);
            let p = deproject(&cam, u, v)?;
            out.push((WorldPoint::new(kp.name.clone(), p), attached.contains(&kp.name.as_str())));
        }
        Ok(out)
    }

    fn intervene(&mut self, lambda: f64, learner: &mut impl LearnerPort) -> Result<Option<InterventionMode>> {
        let (state, obs, subgoal) = self.context_parts();
        let (episode, t) = {
            let ep = self.episode.as_mut().expect("episode present");
            ep.triggers += 1;
            (ep.index, ep.t)
        };
        let latency = self.agent.as_ref().map_or(0, |a| a.latency_steps());
        self.metrics.wall_clock_s += latency as f64 * self.cfg.env.control_period();
        let mut event = TriggerEvent {
            env_steps: self.metrics.env_steps,
            episode,
            t,
            lambda,
            threshold: self.threshold,
            mode: None,
            subgoal: subgoal.id.clone(),
            memory_hit: false,
            fresh_call: false,
            outcome: String::new(),
            guidance_steps: 0,
            payload_digest: String::new(),
        };
        let mut payloads = Vec::new();
        let result = self.dispatch(&state, &obs, &subgoal, learner, &mut event, &mut payloads);
        event.payload_digest = digest(&payloads);
        let ep = self.episode.as_mut().expect("episode present");
        ep.cooldown_until = ep.t + self.cfg.detector.eval_stride;
        match result {
            Ok(()) => {
                self.metrics.triggers.push(event.clone());
                Ok(event.mode)
            }
            Err(Error::Aborted(msg)) => {
                event.outcome = "aborted".into();
                self.metrics.triggers.push(event);
                self.metrics.aborted = Some(msg);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn dispatch(
        &mut self,
        state: &EnvState,
        obs: &Observation,
        subgoal: &Subgoal,
        learner: &mut impl LearnerPort,
        event: &mut TriggerEvent,
        payloads: &mut Vec<String>,
    ) -> Result<()> {
        // A remembered box answers the trigger without consulting the agent.
        let remembered = self.cfg.pruning && self.cfg.memory && self.memory.check(subgoal).is_some();
        let mode = match (self.cfg.guidance, self.cfg.pruning) {
            _ if remembered => InterventionMode::ExplorationPruning,
            (true, true) => {
                let ctx = AgentContext { env_cfg: &self.cfg.env, profile: &self.profile, state, obs, subgoal };
                let on_failure = self.on_failure();
                self.metrics.agent_calls.decide_mode += 1;
                let agent = self.agent.as_deref_mut().expect("agent present");
                let d = call_agent(agent, &mut self.fallback, on_failure, &mut self.metrics.agent_calls, |a| {
                    a.decide_mode(&ctx)
                })?;
                payloads.push(crate::supervisor::wire::encode_strategy(&d));
                d.mode
            }
            (false, true) => InterventionMode::ExplorationPruning,
            _ => InterventionMode::ActionGuidance,
        };
        event.mode = Some(mode);
        match mode {
            InterventionMode::ExplorationPruning => self.prune(state, obs, subgoal, learner, event, payloads),
            InterventionMode::ActionGuidance => self.guide(None, learner, event, payloads),
        }
    }

    fn prune(
        &mut self,
        state: &EnvState,
        obs: &Observation,
        subgoal: &Subgoal,
        learner: &mut impl LearnerPort,
        event: &mut TriggerEvent,
        payloads: &mut Vec<String>,
    ) -> Result<()> {
        *self.metrics.pruning_triggers_by_subgoal.entry(subgoal.id.clone()).or_default() += 1;
        let remembered = if self.cfg.memory { self.memory.check(subgoal) } else { None };
        let b = match remembered {
            Some(b) => {
                self.metrics.agent_calls.memory_hits += 1;
                event.memory_hit = true;
                b
            }
            None => {
                self.metrics.agent_calls.fresh_pruning += 1;
                event.fresh_call = true;
                self.metrics.wall_clock_s += self.cfg.agent_call_seconds;
                let points = match self.perceive_world(payloads) {
                    Ok(p) => p,
                    Err(Error::PerceptionEmpty) => {
                        return match (self.cfg.perception_fallback, self.last_keypoints.clone()) {
                            (PerceptionFallback::Guidance, Some(kps)) => self.guide(Some(kps), learner, event, payloads),
                            _ => {
                                event.outcome = "skipped".into();
                                Ok(())
                            }
                        };
                    }
                    Err(e) => return Err(e),
                };
                self.last_keypoints = Some(keypoint_map(&points));
                let world: Vec<WorldPoint> = points.into_iter().map(|(w, _)| w).collect();
                let ctx = AgentContext { env_cfg: &self.cfg.env, profile: &self.profile, state, obs, subgoal };
                let on_failure = self.on_failure();
                self.metrics.agent_calls.bbox += 1;
                let agent = self.agent.as_deref_mut().expect("agent present");
                let b = call_agent(agent, &mut self.fallback, on_failure, &mut self.metrics.agent_calls, |a| {
                    a.gen_bbox(&ctx, &world)
                })?;
                payloads.push(crate::supervisor::wire::encode_bbox(&b, None));
                if self.cfg.memory {
                    self.memory.upsert(subgoal, b);
                }
                b
            }
        };
        self.active_box = Some((subgoal.clone(), b));
        event.outcome = "pruned".into();
        // Move inside the box when the trigger found the TCP outside it.
        let inner = SpatialConstraint { center: b.center, size: b.size * 0.5 };
        let target = inner.project(&state.tcp.position);
        let wp = Waypoint { target: crate::primitives::TcpState { position: target, ..state.tcp }, kind: WaypointKind::Motion };
        let tracker = TrackerConfig { tol: 0.0, rot_tol: f64::INFINITY, ..self.cfg.tracker };
        let mut steps = 0;
        while steps < tracker.step_cap && self.budget_left() {
            let ep = self.episode.as_ref().expect("episode present");
            if ep.done || contains(&b, &ep.state.tcp.position) {
                break;
            }
            let Some(a) = track_step(&ep.state.tcp, &wp, &tracker) else { break };
            let a = a.clipped(&self.cfg.env.action_limit);
            let stored = learner.policy().normalize_action(&a.delta);
            self.execute(learner, &a, stored, Source::Guidance)?;
            steps += 1;
        }
        event.guidance_steps = steps;
        Ok(())
    }

    fn guide(
        &mut self,
        known: Option<KeypointMap>,
        learner: &mut impl LearnerPort,
        event: &mut TriggerEvent,
        payloads: &mut Vec<String>,
    ) -> Result<()> {
        self.metrics.wall_clock_s += self.cfg.agent_call_seconds;
        let kps = match known {
            Some(k) => k,
            None => match self.perceive_world(payloads) {
                Ok(points) => {
                    let k = keypoint_map(&points);
                    self.last_keypoints = Some(k.clone());
                    k
                }
                Err(Error::PerceptionEmpty) => match (self.cfg.perception_fallback, self.last_keypoints.clone()) {
                    (PerceptionFallback::Guidance, Some(k)) => k,
                    _ => {
                        event.outcome = "skipped".into();
                        return Ok(());
                    }
                },
                Err(e) => return Err(e),
            },
        };
        let (state, obs, subgoal) = self.context_parts();
        let ctx = AgentContext { env_cfg: &self.cfg.env, profile: &self.profile, state: &state, obs: &obs, subgoal: &subgoal };
        let on_failure = self.on_failure();
        self.metrics.agent_calls.waypoints += 1;
        let agent = self.agent.as_deref_mut().expect("agent present");
        let plan = call_agent(agent, &mut self.fallback, on_failure, &mut self.metrics.agent_calls, |a| {
            a.gen_waypoints(&ctx, &kps)
        })?;
        payloads.push(crate::supervisor::wire::encode_tool_calls(&plan));
        let mut wps = resolve_plan(&plan, &kps, &state.tcp, &self.profile.primitives)?;
        agent.adjust_waypoints(&mut wps, &state.tcp);
        event.outcome = "guided".into();
        let tracker = self.cfg.tracker;
        let mut steps = 0;
        'plan: for wp in &wps {
            let mut n = 0;
            loop {
                let ep = self.episode.as_ref().expect("episode present");
                if ep.done || !self.budget_left() {
                    break 'plan;
                }
                let Some(a) = track_step(&ep.state.tcp, wp, &tracker) else { break };
                if n == tracker.step_cap {
                    break;
                }
                let a = a.clipped(&self.cfg.env.action_limit);
                let stored = learner.policy().normalize_action(&a.delta);
                self.execute(learner, &a, stored, Source::Guidance)?;
                n += 1;
                steps += 1;
                if wp.kind == WaypointKind::Gripper {
                    break;
                }
            }
        }
        event.guidance_steps = steps;
        Ok(())
    }

    /// Closes the current episode: success bookkeeping, memory outcomes and
    /// threshold refresh.
    pub fn end_episode(&mut self, learner: &mut impl LearnerPort) -> Result<EpisodeRecord> {
        let mut ep = self.episode.take().ok_or_else(|| Error::Config("no episode in progress".into()))?;
        if let Some(m) = &self.monitor {
            if ep.prefix.len() >= self.cfg.detector.min_prefix.max(1) {
                let l = m.episode_lambda(&ep.prefix, None)?;
                ep.lambda_max = Some(ep.lambda_max.map_or(l, |x| x.max(l)));
            }
            if ep.success {
                if let Some(l) = ep.lambda_max {
                    learner.record_success(SuccessRecord { episode: ep.index, first_seq: ep.first_seq, float_index: l });
                }
            }
        }
        if self.cfg.memory {
            for (id, b) in &ep.used_boxes {
                self.memory.record(&Subgoal::new(id.clone()), *b, ep.success);
            }
        }
        self.episodes_done += 1;
        if self.monitor.is_some()
            && self.cfg.threshold_override.is_none()
            && self.episodes_done % self.cfg.threshold_refresh_every == 0
        {
            let idx = learner.success_indices();
            if idx.len() >= self.cfg.threshold_min_successes.max(1) {
                let t = calibrate_threshold(&idx, &self.cfg.detector)?;
                if t != self.threshold {
                    self.threshold = t;
                    self.metrics.threshold_history.push((self.episodes_done, t));
                }
            }
        }
        let rec = EpisodeRecord {
            episode: ep.index,
            env_steps: self.metrics.env_steps,
            wall_clock_s: self.metrics.wall_clock_s,
            steps: ep.t,
            success: ep.success,
            triggers: ep.triggers,
            guidance_steps: ep.guidance_steps,
            lambda_max: ep.lambda_max,
            threshold: self.threshold,
            losses: learner.last_losses(),
            alpha: learner.alpha(),
        };
        self.metrics.episodes.push(rec);
        self.metrics.updates = learner.updates();
        Ok(rec)
    }

    /// Runs episodes until the budget is spent or the run aborts.
    pub fn run(&mut self, learner: &mut impl LearnerPort) -> Result<()> {
        while self.budget_left() {
            self.begin_episode(learner)?;
            loop {
                let r = self.interaction_step(learner)?;
                if r.done {
                    break;
                }
            }
            self.end_episode(learner)?;
        }
        // Evaluate the final policy if the run stopped before the last
        // scheduled checkpoint.
        if self.metrics.checkpoints.last().map(|c| c.env_steps) != Some(self.metrics.env_steps) && self.metrics.env_steps > 0 {
            let rate = evaluate(learner.policy(), &self.cfg.env, self.cfg.eval_episodes, self.cfg.seed)?;
            self.metrics.checkpoints.push(CheckpointEval {
                env_steps: self.metrics.env_steps,
                episode: self.episodes_done,
                wall_clock_s: self.metrics.wall_clock_s,
                success_rate: rate,
            });
        }
        self.metrics.updates = learner.updates();
        Ok(())
    }
}

fn keypoint_map(points: &[(WorldPoint, bool)]) -> KeypointMap {
    let mut k = KeypointMap::new();
    for (w, attached) in points {
        if *attached {
            k.insert_attached(w.name.clone(), w.p);
        } else {
            k.insert(w.name.clone(), w.p);
        }
    }
    k
}

trait GenSeed {
    fn gen_seed(&mut self) -> u64;
}

impl GenSeed for ChaCha8Rng {
    fn gen_seed(&mut self) -> u64 {
        rand::Rng::gen(self)
    }
}

/// Demo transitions as replay items, actions normalised by the env limits.
pub fn demo_buffer(demos: &DemoSet, env: &EnvConfig, capacity: usize) -> ReplayBuffer {
    let mut buf = ReplayBuffer::new(capacity.max(demos.transitions().count()));
    for t in demos.transitions() {
        let mut a = [0.0; 6];
        for j in 0..6 {
            a[j] = (t.action.delta[j] / env.action_limit[j]).clamp(-1.0, 1.0);
        }
        buf.push(Transition {
            obs: observe(&t.state, env).flat(),
            action: a,
            reward: t.reward,
            next_obs: observe(&t.next, env).flat(),
            done: t.success,
            success: t.success,
            source: Source::Demo,
        });
    }
    buf
}

/// Generates the run's demos from its seed.
pub fn run_demos(cfg: &RunConfig) -> Result<DemoSet> {
    Ok(generate_demos(&cfg.env, cfg.n_demos, &mut stream(cfg.seed, STREAM_DEMO))?)
}

/// Full training run. Demos are generated from the seed when absent; the
/// agent is built from the config unless one is supplied.
pub fn run_training_with(cfg: &RunConfig, demos: Option<&DemoSet>, agent: Option<Box<dyn Agent>>) -> Result<RunOutput> {
    cfg.validate()?;
    let generated;
    let demos = match demos {
        Some(d) => d,
        None => {
            generated = run_demos(cfg)?;
            &generated
        }
    };
    if demos.task != cfg.env.task {
        return Err(Error::Config(format!("demos are for {:?}, run is {:?}", demos.task, cfg.env.task)));
    }
    let sac = Sac::new(
        cfg.train.clone(),
        standardization(&cfg.env, 0.0),
        cfg.env.action_limit,
        &mut stream(cfg.seed, STREAM_INIT),
    )?;
    let demo = demo_buffer(demos, &cfg.env, cfg.train.buffer_capacity);
    let mut session = Session::new(cfg.clone(), demos, agent)?;
    if cfg.single_threaded {
        let mut learner = InlineLearner::new(sac, demo, stream(cfg.seed, STREAM_LEARN));
        session.run(&mut learner)?;
        return Ok(RunOutput { metrics: session.metrics, sac: learner.sac });
    }
    let shared = Arc::new(SharedLearner {
        online: Mutex::new(ReplayBuffer::new(cfg.train.buffer_capacity)),
        demo: Mutex::new(demo),
        snapshot: Mutex::new(Arc::new(sac.policy.clone())),
        losses: Mutex::new(None),
        env_steps: AtomicUsize::new(0),
        updates: AtomicU64::new(0),
        stop: AtomicBool::new(false),
        error: Mutex::new(None),
    });
    let mut port = ThreadedPort {
        policy: Arc::new(sac.policy.clone()),
        shared: shared.clone(),
        mirror: cfg.train.mirror_guidance_to_demo,
        init_alpha: cfg.train.init_alpha,
    };
    let rng = stream(cfg.seed, STREAM_LEARN);
    let publish = cfg.publish_every;
    let worker = {
        let shared = shared.clone();
        std::thread::spawn(move || learner_loop(&shared, sac, rng, publish))
    };
    let res = session.run(&mut port);
    shared.stop.store(true, Ordering::Release);
    let sac = worker.join().map_err(|_| Error::Aborted("learner thread panicked".into()))?;
    res?;
    session.metrics.updates = sac.updates;
    Ok(RunOutput { metrics: session.metrics, sac })
}

pub fn run_training(cfg: &RunConfig) -> Result<RunMetrics> {
    Ok(run_training_with(cfg, None, None)?.metrics)
}

/// Runs the agent's full-task plan open loop from each start state.
pub struct OpenLoopPlanner {
    agent: Box<dyn Agent>,
    profile: TaskProfile,
    tracker: TrackerConfig,
    actions: std::collections::VecDeque<EnvAction>,
}

impl OpenLoopPlanner {
    pub fn new(agent: Box<dyn Agent>, cfg: &RunConfig) -> Self {
        let mut profile = cfg.profile();
        profile.guidance_scope = GuidanceScope::FullTask;
        OpenLoopPlanner { agent, profile, tracker: cfg.tracker, actions: Default::default() }
    }
}

impl Controller for OpenLoopPlanner {
    fn begin_episode(&mut self, state: &EnvState, cfg: &EnvConfig) -> Result<()> {
        let obs = observe(state, cfg);
        let ctx = AgentContext { env_cfg: cfg, profile: &self.profile, state, obs: &obs, subgoal: &state.phase };
        let cam = camera_for_state(cfg, state);
        let attached: Vec<&str> = task_keypoints(cfg, state).into_iter().filter(|k| k.2).map(|k| k.0).collect();
        let mut points = Vec::new();
        for kp in self.agent.perceive(&ctx, &cam)? {
            let (u, v) = denormalize_pixel(&kp, cam.width, cam.height);
            let p = deproject(&cam, u, v)?;
            points.push((WorldPoint::new(kp.name.clone(), p), attached.contains(&kp.name.as_str())));
        }
        let kps = keypoint_map(&points);
        let plan = self.agent.gen_waypoints(&ctx, &kps)?;
        let pa = crate::primitives::plan_to_actions(&plan, &kps, &state.tcp, &self.profile.primitives, &self.tracker)?;
        self.actions = pa.actions.into();
        Ok(())
    }

    fn act(&mut self, _state: &EnvState, _obs: &Observation, _cfg: &EnvConfig) -> Result<EnvAction> {
        Ok(self.actions.pop_front().unwrap_or_else(EnvAction::zero))
    }
}

/// The planner baseline: no learning, every checkpoint evaluates the same
/// open-loop controller.
pub fn run_open_loop(cfg: &RunConfig, agent: Option<Box<dyn Agent>>) -> Result<RunMetrics> {
    cfg.validate()?;
    let agent: Box<dyn Agent> = match agent {
        Some(a) => a,
        None => Box::new(OracleAgent::new(cfg.oracle, stream(cfg.seed, STREAM_AGENT).gen_seed())?),
    };
    let mut planner = OpenLoopPlanner::new(agent, cfg);
    let mut metrics = RunMetrics { config_hash: cfg.fingerprint(), ..RunMetrics::default() };
    for steps in cfg.checkpoint_steps() {
        let rate = evaluate_controller(&mut planner, &cfg.env, cfg.eval_episodes, cfg.seed)?;
        metrics.agent_calls.perceive += cfg.eval_episodes;
        metrics.agent_calls.waypoints += cfg.eval_episodes;
        metrics.checkpoints.push(CheckpointEval {
            env_steps: steps,
            episode: 0,
            wall_clock_s: steps as f64 * cfg.env.control_period(),
            success_rate: rate,
        });
    }
    metrics.env_steps = cfg.budget_steps;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(budget: usize) -> RunConfig {
        let mut c = RunConfig::default();
        c.budget_steps = budget;
        c.n_demos = 4;
        c.eval_episodes = 2;
        c.train.min_buffer = 32;
        c.train.batch_size = 16;
        c.train.hidden = 8;
        c
    }

    #[test]
    fn subsample_keeps_ends() {
        let xs: Vec<usize> = (0..100).collect();
        let s = subsample(&xs, 16);
        assert_eq!(s.len(), 16);
        assert_eq!((s[0], s[15]), (0, 99));
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample(&xs[..5], 16), xs[..5].to_vec());
    }

    #[test]
    fn checkpoints_end_at_budget() {
        let c = quick(1000);
        assert_eq!(c.checkpoint_steps(), vec![250, 500, 750, 1000]);
    }

    #[test]
    fn zero_eval_episodes_is_an_error() {
        let cfg = EnvConfig::insertion();
        assert!(evaluate_controller(&mut ExpertController, &cfg, 0, 0).is_err());
    }

    #[test]
    fn expert_controller_solves_noise_free_insertion() {
        let mut cfg = EnvConfig::insertion();
        cfg.transition_noise_sigma = 0.0;
        assert_eq!(evaluate_controller(&mut ExpertController, &cfg, 10, 0).unwrap(), 1.0);
    }

    #[test]
    fn no_agent_means_no_monitor() {
        let mut c = quick(300);
        c.agent = AgentKind::None;
        let m = run_training(&c).unwrap();
        assert!(m.triggers.is_empty() && m.lambda_series.is_empty());
        assert_eq!(m.env_steps, 300);
        assert_eq!(m.checkpoints.len(), 4);
    }

    #[test]
    fn huge_threshold_means_no_agent_calls() {
        let mut c = quick(400);
        c.threshold_override = Some(10.0);
        let m = run_training(&c).unwrap();
        assert!(!m.lambda_series.is_empty());
        assert!(m.triggers.is_empty());
        assert_eq!(m.agent_calls, AgentCalls::default());
    }

    #[test]
    fn zero_threshold_triggers_at_strides_only() {
        let mut c = quick(400);
        c.threshold_override = Some(0.0);
        let m = run_training(&c).unwrap();
        assert!(!m.triggers.is_empty());
        for t in &m.triggers {
            assert_eq!(t.t % c.detector.eval_stride, 0);
            assert!(t.lambda > t.threshold);
        }
        let calls = &m.agent_calls;
        let pruned: usize = m.pruning_triggers_by_subgoal.values().sum();
        assert_eq!(calls.fresh_pruning + calls.memory_hits, pruned);
        assert_eq!(m.constraint_violations, 0);
    }

    #[test]
    fn single_threaded_runs_repeat() {
        let c = quick(300);
        let a = run_training(&c).unwrap();
        let b = run_training(&c).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a, b);
    }
}
