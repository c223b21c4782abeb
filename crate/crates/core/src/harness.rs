//! Experiment runner: baselines, seed sweeps, aggregation, the memory
//! ablation and value-map exports. Everything here is a thin layer over
//! [`crate::orchestrator`]; the CLI maps one subcommand to one `cmd_*`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::env::{camera_for_state, generate_demos, observe, reset, DemoSet, EnvConfig, EnvState, Task};
use crate::error::{Error, Result};
use crate::geometry::{denormalize_pixel, deproject, SpatialConstraint, WorldPoint};
use crate::orchestrator::{
    evaluate, evaluate_controller, run_open_loop, run_training_with, stream, AgentKind, ExpertController, RunConfig,
    RunMetrics,
};
use crate::rl::qmap::GridAxis;
use crate::rl::{q_landscape, Checkpoint, QGrid, SliceSpec};
use crate::supervisor::{Agent, AgentContext, OracleAgent, OracleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Agps,
    Serl,
    PruningOnly,
    GuidanceOnly,
    /// Guidance from a synthetic teleoperator: slow, noisy, sometimes wrong.
    ScriptedHil,
    OpenLoopPlanner,
}

impl Baseline {
    pub const ALL: [Baseline; 6] = [
        Baseline::Agps,
        Baseline::Serl,
        Baseline::PruningOnly,
        Baseline::GuidanceOnly,
        Baseline::ScriptedHil,
        Baseline::OpenLoopPlanner,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Baseline::Agps => "agps",
            Baseline::Serl => "serl",
            Baseline::PruningOnly => "pruning_only",
            Baseline::GuidanceOnly => "guidance_only",
            Baseline::ScriptedHil => "scripted_hil",
            Baseline::OpenLoopPlanner => "open_loop_planner",
        }
    }

    /// Rewrites the switches a baseline owns; everything else is kept.
    pub fn apply(&self, cfg: &mut RunConfig) {
        match self {
            Baseline::Agps | Baseline::OpenLoopPlanner => {}
            Baseline::Serl => {
                cfg.agent = AgentKind::None;
                cfg.guidance = false;
                cfg.pruning = false;
            }
            Baseline::PruningOnly => cfg.guidance = false,
            Baseline::GuidanceOnly => cfg.pruning = false,
            Baseline::ScriptedHil => {
                cfg.agent = AgentKind::Oracle;
                cfg.pruning = false;
                cfg.memory = false;
                cfg.oracle = OracleConfig::scripted_hil();
            }
        }
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline `{s}`")))
    }
}

impl std::fmt::Display for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    /// Config shared by every seed; the seed and the baseline switches are
    /// filled in per run.
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    pub baseline: Baseline,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(name: impl Into<String>, base: RunConfig, seeds: Vec<u64>, baseline: Baseline) -> Self {
        ExperimentSpec { name: name.into(), base, seeds, baseline, out_dir: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one seed".into()));
        }
        let mut cfg = self.run_config(self.seeds[0]);
        cfg.seed = 0;
        cfg.validate()
    }

    pub fn run_config(&self, seed: u64) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.seed = seed;
        self.baseline.apply(&mut cfg);
        cfg
    }
}

/// Median and quartiles of one quantity across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Spread {
    /// Linear-interpolated quartiles. Empty input gives NaNs.
    pub fn of(xs: &[f64]) -> Spread {
        let mut v: Vec<f64> = xs.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        Spread { median: quantile(&v, 0.5), q1: quantile(&v, 0.25), q3: quantile(&v, 0.75) }
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env_steps: usize,
    pub success: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsArchive {
    pub name: String,
    pub baseline: Baseline,
    /// Hash of the spec's shared config; each run also carries its own.
    pub fingerprint: String,
    pub runs: Vec<SeedRun>,
    pub success_curve: Vec<CurvePoint>,
    pub final_success: Spread,
    pub fresh_agent_calls: Spread,
}

impl MetricsArchive {
    pub fn from_runs(spec: &ExperimentSpec, runs: Vec<SeedRun>) -> Self {
        let mut by_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in &runs {
            for c in &r.metrics.checkpoints {
                by_step.entry(c.env_steps).or_default().push(c.success_rate);
            }
        }
        let success_curve =
            by_step.into_iter().map(|(env_steps, xs)| CurvePoint { env_steps, success: Spread::of(&xs) }).collect();
        let finals: Vec<f64> = runs.iter().filter_map(|r| r.metrics.final_success_rate()).collect();
        let fresh: Vec<f64> = runs.iter().map(|r| fresh_calls(&r.metrics) as f64).collect();
        MetricsArchive {
            name: spec.name.clone(),
            baseline: spec.baseline,
            fingerprint: spec.base.fingerprint(),
            runs,
            success_curve,
            final_success: Spread::of(&finals),
            fresh_agent_calls: Spread::of(&fresh),
        }
    }

    pub fn aborted(&self) -> Vec<(u64, String)> {
        self.runs.iter().filter_map(|r| r.metrics.aborted.clone().map(|m| (r.seed, m))).collect()
    }

    /// All seeds in one CSV: the per-run rows prefixed by a seed column.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.runs.iter().enumerate() {
            let csv = r.metrics.to_csv();
            let mut lines = csv.lines();
            let header = lines.next().unwrap_or_default();
            if i == 0 {
                out.push_str(&format!("seed,{header}\n"));
            }
            for l in lines {
                out.push_str(&format!("{},{l}\n", r.seed));
            }
        }
        out
    }

    /// Writes `metrics.csv`, `audit.jsonl` and `report.json` into `dir`,
    /// plus one sub-directory per seed with that run's files.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.to_csv())?;
        let mut audit = String::new();
        for r in &self.runs {
            for line in r.metrics.audit_jsonl().lines() {
                audit.push_str(&format!("{{\"seed\":{},\"event\":{line}}}\n", r.seed));
            }
            let sd = dir.join(format!("seed_{}", r.seed));
            fs::create_dir_all(&sd)?;
            fs::write(sd.join("metrics.csv"), r.metrics.to_csv())?;
            fs::write(sd.join("audit.jsonl"), r.metrics.audit_jsonl())?;
        }
        fs::write(dir.join("audit.jsonl"), audit)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report())?)?;
        Ok(())
    }

    /// Summary without the per-step series.
    pub fn report(&self) -> Value {
        let seeds: Vec<Value> = self
            .runs
            .iter()
            .map(|r| {
                serde_json::json!({
                    "seed": r.seed,
                    "config_hash": r.metrics.config_hash,
                    "final_success": r.metrics.final_success_rate(),
                    "episodes": r.metrics.episodes.len(),
                    "env_steps": r.metrics.env_steps,
                    "wall_clock_s": r.metrics.wall_clock_s,
                    "triggers": r.metrics.triggers.len(),
                    "triggers_last_10": r.metrics.triggers_in_last(10),
                    "fresh_agent_calls": fresh_calls(&r.metrics),
                    "agent_calls": r.metrics.agent_calls,
                    "aborted": r.metrics.aborted,
                })
            })
            .collect();
        serde_json::json!({
            "name": self.name,
            "baseline": self.baseline,
            "fingerprint": self.fingerprint,
            "final_success": self.final_success,
            "fresh_agent_calls": self.fresh_agent_calls,
            "success_curve": self.success_curve,
            "seeds": seeds,
        })
    }
}

/// Agent inferences a run paid for: every decision, perception, box and
/// plan request. Memory hits cost nothing.
pub fn fresh_calls(m: &RunMetrics) -> usize {
    let c = &m.agent_calls;
    c.decide_mode + c.perceive + c.bbox + c.waypoints
}

/// Writes `n` expert demos for `task` to `out`.
pub fn cmd_demo_gen(task: Task, n: usize, seed: u64, out: &Path) -> Result<DemoSet> {
    if n == 0 {
        return Err(Error::Config("demo count must be >= 1".into()));
    }
    let mut cfg = RunConfig::for_env(EnvConfig::for_task(task));
    cfg.seed = seed;
    cfg.n_demos = n;
    let demos = crate::orchestrator::run_demos(&cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    demos.write_to(fs::File::create(out)?)?;
    Ok(demos)
}

/// Same, with an explicit env config.
pub fn demo_gen_with(env: &EnvConfig, n: usize, seed: u64) -> Result<DemoSet> {
    if n == 0 {
        return Err(Error::Config("demo count must be >= 1".into()));
    }
    Ok(generate_demos(env, n, &mut stream(seed, 4))?)
}

pub fn load_demos(path: &Path) -> Result<DemoSet> {
    let f = fs::File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(DemoSet::read_from(std::io::BufReader::new(f))?)
}

/// One run per seed. When `out_dir` is set each seed also leaves its
/// learner checkpoint and resolved config behind.
pub fn cmd_train(spec: &ExperimentSpec, demos: Option<&DemoSet>) -> Result<MetricsArchive> {
    spec.validate()?;
    let mut runs = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let cfg = spec.run_config(seed);
        let metrics = if spec.baseline == Baseline::OpenLoopPlanner {
            run_open_loop(&cfg, None)?
        } else {
            let out = run_training_with(&cfg, demos, None)?;
            if let Some(dir) = &spec.out_dir {
                let sd = dir.join(format!("seed_{seed}"));
                fs::create_dir_all(&sd)?;
                Checkpoint::new(cfg.fingerprint(), cfg.env.task, out.metrics.env_steps, out.sac)
                    .save(&sd.join("checkpoint.json"))?;
                fs::write(sd.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
            }
            out.metrics
        };
        runs.push(SeedRun { seed, metrics });
    }
    let archive = MetricsArchive::from_runs(spec, runs);
    if let Some(dir) = &spec.out_dir {
        archive.write(dir)?;
    }
    Ok(archive)
}

/// Deterministic success rate of a saved learner over `n` fresh resets.
pub fn cmd_eval(checkpoint: &Path, env: Option<&EnvConfig>, n: usize, seed: u64) -> Result<f64> {
    let ck = load_checkpoint(checkpoint)?;
    let env = env.cloned().unwrap_or_else(|| EnvConfig::for_task(ck.task));
    if env.task != ck.task {
        return Err(Error::Config(format!("checkpoint is for {:?}, env is {:?}", ck.task, env.task)));
    }
    evaluate(&ck.sac.policy, &env, n, seed)
}

/// The scripted expert in place of a policy.
pub fn cmd_eval_expert(env: &EnvConfig, n: usize, seed: u64) -> Result<f64> {
    evaluate_controller(&mut ExpertController, env, n, seed)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSeed {
    pub seed: u64,
    pub fresh_calls_on: usize,
    pub fresh_calls_off: usize,
    /// Fresh box requests alone.
    pub fresh_boxes_on: usize,
    pub fresh_boxes_off: usize,
    /// Most pruning triggers any subgoal received with memory off.
    pub max_repeats_off: usize,
    pub steps_to_90_on: Option<usize>,
    pub steps_to_90_off: Option<usize>,
    /// `steps_to_90_off / steps_to_90_on` when both exist.
    pub speedup: Option<f64>,
    /// Triggers before the first memory hit agree between the two runs.
    pub prefix_identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryAblation {
    pub on: MetricsArchive,
    pub off: MetricsArchive,
    pub seeds: Vec<AblationSeed>,
}

impl MemoryAblation {
    pub fn report(&self) -> Value {
        serde_json::json!({
            "fingerprint_on": self.on.fingerprint,
            "fingerprint_off": self.off.fingerprint,
            "seeds": self.seeds,
            "median_speedup": Spread::of(&self.seeds.iter().filter_map(|s| s.speedup).collect::<Vec<_>>()).median,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.on.write(&dir.join("memory_on"))?;
        self.off.write(&dir.join("memory_off"))?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report())?)?;
        Ok(())
    }
}

/// First checkpoint at or above 0.9 success.
pub fn steps_to_90(m: &RunMetrics) -> Option<usize> {
    m.checkpoints.iter().find(|c| c.success_rate >= 0.9).map(|c| c.env_steps)
}

/// Paired runs, memory on and off, on the same seeds.
pub fn cmd_ablate_memory(spec: &ExperimentSpec, demos: Option<&DemoSet>) -> Result<MemoryAblation> {
    if spec.baseline != Baseline::Agps {
        return Err(Error::Config("the memory ablation runs on the agps baseline".into()));
    }
    let variant = |memory: bool, tag: &str| {
        let mut s = spec.clone();
        s.base.memory = memory;
        s.name = format!("{}_{tag}", spec.name);
        s.out_dir = None;
        s
    };
    let on = cmd_train(&variant(true, "memory_on"), demos)?;
    let off = cmd_train(&variant(false, "memory_off"), demos)?;
    let seeds = pair_ablation(&on, &off);
    let ab = MemoryAblation { on, off, seeds };
    if let Some(dir) = &spec.out_dir {
        ab.write(dir)?;
    }
    Ok(ab)
}

/// Per-seed comparison of memory-on and memory-off archives run on the same seeds.
pub fn pair_ablation(on: &MetricsArchive, off: &MetricsArchive) -> Vec<AblationSeed> {
    on.runs
        .iter()
        .zip(&off.runs)
        .map(|(a, b)| {
            let (s_on, s_off) = (steps_to_90(&a.metrics), steps_to_90(&b.metrics));
            let first_hit = a.metrics.triggers.iter().position(|t| t.memory_hit).unwrap_or(a.metrics.triggers.len());
            let prefix_identical = b.metrics.triggers.len() >= first_hit
                && a.metrics.triggers[..first_hit] == b.metrics.triggers[..first_hit];
            AblationSeed {
                seed: a.seed,
                fresh_calls_on: fresh_calls(&a.metrics),
                fresh_calls_off: fresh_calls(&b.metrics),
                fresh_boxes_on: a.metrics.agent_calls.fresh_pruning,
                fresh_boxes_off: b.metrics.agent_calls.fresh_pruning,
                max_repeats_off: b.metrics.pruning_triggers_by_subgoal.values().copied().max().unwrap_or(0),
                steps_to_90_on: s_on,
                steps_to_90_off: s_off,
                speedup: s_on.zip(s_off).map(|(x, y)| y as f64 / x as f64),
                prefix_identical,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QmapReport {
    pub config_hash: String,
    pub grid: QGrid,
    pub bbox: SpatialConstraint,
    /// Argmax cell as a world point; unswept axes sit at the box centre.
    pub argmax: [f64; 3],
    pub argmax_q: f64,
    pub distance: f64,
    pub half_diagonal: f64,
}

impl QmapReport {
    pub fn aligned(&self) -> bool {
        self.distance <= self.half_diagonal
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("qmap.csv"), self.grid.to_csv())?;
        let report = serde_json::json!({
            "config_hash": self.config_hash,
            "bbox_3d": self.bbox.to_bbox_3d(),
            "bbox_center": [self.bbox.center.x, self.bbox.center.y, self.bbox.center.z],
            "argmax": self.argmax,
            "argmax_q": self.argmax_q,
            "distance": self.distance,
            "half_diagonal": self.half_diagonal,
            "aligned": self.aligned(),
        });
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        Ok(())
    }
}

/// The box a fresh oracle draws for the nominal scene of `cfg`.
pub fn oracle_bbox(cfg: &RunConfig, state: &EnvState, seed: u64) -> Result<SpatialConstraint> {
    let mut agent = OracleAgent::new(cfg.oracle, seed)?;
    let profile = cfg.profile();
    let obs = observe(state, &cfg.env);
    let ctx = AgentContext { env_cfg: &cfg.env, profile: &profile, state, obs: &obs, subgoal: &state.phase };
    let cam = camera_for_state(&cfg.env, state);
    let mut world = Vec::new();
    for kp in agent.perceive(&ctx, &cam)? {
        let (u, v) = denormalize_pixel(&kp, cam.width, cam.height);
        world.push(WorldPoint::new(kp.name.clone(), deproject(&cam, u, v)?));
    }
    if world.is_empty() {
        return Err(Error::PerceptionEmpty);
    }
    agent.gen_bbox(&ctx, &world)
}

/// Default slice: x and y over the reset range at the height of the box
/// centre, other components from the nominal start.
pub fn default_slice(env: &EnvConfig, bbox: &SpatialConstraint, state: &EnvState, n: usize) -> SliceSpec {
    let mut base_obs = observe(state, env).flat();
    base_obs[0] = bbox.center.x;
    base_obs[1] = bbox.center.y;
    base_obs[2] = bbox.center.z;
    let (g, r) = (env.goal, env.reset_xyz);
    SliceSpec {
        base_obs,
        a: GridAxis { name: "x".into(), index: 0, lo: g.x - r.x, hi: g.x + r.x, n },
        b: GridAxis { name: "y".into(), index: 1, lo: g.y - r.y, hi: g.y + r.y, n },
    }
}

/// Value map of a checkpoint with the oracle box overlaid.
pub fn cmd_export_qmap(checkpoint: &Path, cfg: &RunConfig, slice: Option<SliceSpec>, grid_n: usize) -> Result<QmapReport> {
    let ck = load_checkpoint(checkpoint)?;
    if ck.task != cfg.env.task {
        return Err(Error::Config(format!("checkpoint is for {:?}, config is {:?}", ck.task, cfg.env.task)));
    }
    let mut nominal = reset(&cfg.env, &mut stream(cfg.seed, 6));
    nominal.tcp.position = cfg.env.nominal_start();
    nominal.tcp.rpy = nominal.goal_pose.rpy;
    let bbox = oracle_bbox(cfg, &nominal, stream(cfg.seed, 5).next_u64_seed())?;
    let slice = slice.unwrap_or_else(|| default_slice(&cfg.env, &bbox, &nominal, grid_n));
    let grid = q_landscape(&ck.sac, &slice)?;
    let (a, b, q) = grid.argmax();
    let mut p = [slice.base_obs[0], slice.base_obs[1], slice.base_obs[2]];
    for (axis, v) in [(&slice.a, a), (&slice.b, b)] {
        if axis.index < 3 {
            p[axis.index] = v;
        }
    }
    let c = bbox.center;
    let distance = ((p[0] - c.x).powi(2) + (p[1] - c.y).powi(2) + (p[2] - c.z).powi(2)).sqrt();
    Ok(QmapReport {
        config_hash: ck.config_hash,
        grid,
        half_diagonal: bbox.half_diagonal(),
        bbox,
        argmax: p,
        argmax_q: q,
        distance,
    })
}

trait SeedFrom {
    fn next_u64_seed(self) -> u64;
}

impl SeedFrom for rand_chacha::ChaCha8Rng {
    fn next_u64_seed(mut self) -> u64 {
        rand::RngCore::next_u64(&mut self)
    }
}

/// Recursively overlays `top` onto `base`; tables merge, anything else is
/// replaced.
pub fn merge_json(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Task defaults overlaid with each TOML file in order; later files win.
/// Unknown keys are rejected so typos do not pass silently.
pub fn load_run_config(task: Task, layers: &[PathBuf]) -> Result<RunConfig> {
    let mut v = serde_json::to_value(RunConfig::for_env(EnvConfig::for_task(task)))?;
    for path in layers {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let layer: toml::Value =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let layer = serde_json::to_value(layer)?;
        check_keys(&v, &layer, "")?;
        merge_json(&mut v, layer);
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    if cfg.env.task != task {
        return Err(Error::Config(format!("config layers set task {:?}, expected {:?}", cfg.env.task, task)));
    }
    Ok(cfg)
}

fn check_keys(base: &Value, layer: &Value, prefix: &str) -> Result<()> {
    if let (Value::Object(b), Value::Object(l)) = (base, layer) {
        for (k, v) in l {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match b.get(k) {
                None if !b.is_empty() => return Err(Error::Config(format!("unknown config key `{path}`"))),
                Some(inner) => check_keys(inner, v, &path)?,
                None => {}
            }
        }
    }
    Ok(())
}

/// Short hex digest of arbitrary bytes, for file fingerprints in reports.
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_quartiles() {
        let s = Spread::of(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!((s.median, s.q1, s.q3), (3.0, 2.0, 4.0));
        assert_eq!(Spread::of(&[1.0, 2.0]).median, 1.5);
        assert!(Spread::of(&[]).median.is_nan());
    }

    #[test]
    fn baseline_names_round_trip() {
        for b in Baseline::ALL {
            assert_eq!(b.as_str().parse::<Baseline>().unwrap(), b);
        }
        assert!("hil".parse::<Baseline>().is_err());
    }

    #[test]
    fn serl_switches_everything_off() {
        let mut c = RunConfig::default();
        Baseline::Serl.apply(&mut c);
        assert!(!c.interventions_enabled());
        let mut c = RunConfig::default();
        Baseline::ScriptedHil.apply(&mut c);
        assert!(c.guidance && !c.pruning && c.oracle.wrong_direction_prob > 0.0);
    }

    #[test]
    fn empty_seed_list_rejected() {
        let s = ExperimentSpec::new("x", RunConfig::default(), vec![], Baseline::Agps);
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_demos_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(cmd_demo_gen(Task::Insertion, 0, 0, &dir.path().join("d")), Err(Error::Config(_))));
    }

    #[test]
    fn toml_layers_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.toml");
        let b = dir.path().join("b.toml");
        fs::write(&a, "budget_steps = 500\n[train]\nbatch_size = 32\n").unwrap();
        fs::write(&b, "budget_steps = 700\n").unwrap();
        let c = load_run_config(Task::Insertion, &[a.clone(), b]).unwrap();
        assert_eq!((c.budget_steps, c.train.batch_size), (700, 32));
        assert_eq!(c.train.gamma, RunConfig::default().train.gamma);
        fs::write(&a, "budgt_steps = 1\n").unwrap();
        assert!(load_run_config(Task::Insertion, &[a]).is_err());
    }

    #[test]
    fn missing_checkpoint_is_a_config_error() {
        let r = cmd_eval(Path::new("/nonexistent/ck.json"), None, 10, 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn expert_eval_is_perfect() {
        let mut env = EnvConfig::insertion();
        env.transition_noise_sigma = 0.0;
        assert_eq!(cmd_eval_expert(&env, 10, 3).unwrap(), 1.0);
    }
}
