//! Entropy-regularised actor-critic with twin critics and a tanh-squashed
//! Gaussian policy.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::buffer::Transition;
use super::nn::{Adam, Grads, Mlp, ScalarAdam};
use super::RlError;
use crate::encoding::{Observation, Standardization};
use crate::env::EnvAction;
use crate::geometry::{clamp_action_to_box, SpatialConstraint};
use crate::Vec3;

pub const ACT_DIM: usize = 6;
/// Keeps `log(1 - tanh^2)` finite at saturation.
const SQUASH_EPS: f64 = 1e-6;
const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Split evenly between demo and online samples.
    pub batch_size: usize,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    /// Target smoothing coefficient.
    pub tau: f64,
    pub init_alpha: f64,
    pub auto_alpha: bool,
    /// Entropy target; `-ACT_DIM / 2` when absent.
    pub target_entropy: Option<f64>,
    /// Gradient steps per consumed env step.
    pub utd_ratio: usize,
    pub min_buffer: usize,
    pub hidden: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub buffer_capacity: usize,
    /// Also copy guidance transitions into the demo buffer.
    pub mirror_guidance_to_demo: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            gamma: 0.97,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            tau: 0.005,
            // Larger starting temperatures let the entropy bonus swamp the sparse
            // reward until alpha anneals.
            init_alpha: 0.01,
            auto_alpha: true,
            target_entropy: None,
            utd_ratio: 1,
            min_buffer: 100,
            hidden: 64,
            log_std_min: -5.0,
            log_std_max: 1.0,
            buffer_capacity: 100_000,
            mirror_guidance_to_demo: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: String| Err(RlError::InvalidConfig(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad(format!("batch size must be even and >= 2, got {}", self.batch_size));
        }
        if self.hidden == 0 || self.utd_ratio == 0 {
            return bad("hidden width and utd ratio must be positive".into());
        }
        if !(self.log_std_min < self.log_std_max) {
            return bad("log_std_min must be below log_std_max".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) || !(self.init_alpha > 0.0) {
            return bad("tau must lie in (0, 1] and init_alpha be positive".into());
        }
        Ok(())
    }

    pub fn entropy_target(&self) -> f64 {
        self.target_entropy.unwrap_or(-(ACT_DIM as f64) / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

fn featurize(std: &Standardization, obs: &[f64]) -> Vec<f64> {
    obs.iter().zip(&std.center).zip(&std.scale).map(|((x, c), k)| (x - c) * k).collect()
}

/// Actor head output split into mean and bounded log-std.
struct Heads {
    mu: Array2<f64>,
    raw: Array2<f64>,
    log_std: Array2<f64>,
}

fn heads(out: Array2<f64>, lo: f64, hi: f64) -> Heads {
    let mu = out.slice(s![.., ..ACT_DIM]).to_owned();
    let raw = out.slice(s![.., ACT_DIM..]).to_owned();
    let log_std = raw.mapv(|r| lo + 0.5 * (hi - lo) * (r.tanh() + 1.0));
    Heads { mu, raw, log_std }
}

/// Reparameterised sample: `a = tanh(mu + sigma * eps)` and its log-density.
fn squash(h: &Heads, eps: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let sigma = h.log_std.mapv(f64::exp);
    let u = &h.mu + &(&sigma * eps);
    let a = u.mapv(f64::tanh);
    let mut logp = Array1::zeros(a.nrows());
    for b in 0..a.nrows() {
        let mut lp = 0.0;
        for j in 0..ACT_DIM {
            let e = eps[(b, j)];
            lp += -0.5 * e * e - h.log_std[(b, j)] - 0.5 * LOG_2PI - (1.0 - a[(b, j)].powi(2) + SQUASH_EPS).ln();
        }
        logp[b] = lp;
    }
    (a, logp)
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Acting half of the agent; cheap to clone and publish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub features: Standardization,
    pub action_limit: [f64; 6],
    pub actor: Mlp,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Policy {
    pub fn obs_dim(&self) -> usize {
        self.features.center.len()
    }

    pub fn featurize(&self, obs: &[f64]) -> Vec<f64> {
        featurize(&self.features, obs)
    }

    /// Normalised action in `[-1, 1]^6`.
    pub fn act_normalized(&self, obs: &[f64], mode: ActMode, rng: &mut impl Rng) -> [f64; 6] {
        let x = Array2::from_shape_vec((1, self.obs_dim()), self.featurize(obs)).expect("feature row");
        let h = heads(self.actor.forward(&x), self.log_std_min, self.log_std_max);
        let mut out = [0.0; 6];
        match mode {
            ActMode::Deterministic => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = h.mu[(0, j)].tanh();
                }
            }
            ActMode::Stochastic => {
                let eps = normal_matrix(1, ACT_DIM, rng);
                let (a, _) = squash(&h, &eps);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = a[(0, j)];
                }
            }
        }
        out
    }

    /// Scaled env action; with a constraint the translation is clipped so the
    /// nominal next TCP stays inside the box.
    pub fn act(
        &self,
        obs: &Observation,
        constraint: Option<&SpatialConstraint>,
        tcp: &Vec3,
        mode: ActMode,
        rng: &mut impl Rng,
    ) -> Result<EnvAction, RlError> {
        if obs.dim() != self.obs_dim() {
            return Err(RlError::DimensionMismatch { expected: self.obs_dim(), got: obs.dim() });
        }
        let a = self.act_normalized(&obs.flat(), mode, rng);
        let mut delta = [0.0; 6];
        for j in 0..ACT_DIM {
            delta[j] = a[j] * self.action_limit[j];
        }
        if let Some(b) = constraint {
            delta = clamp_action_to_box(tcp, &delta, b).map_err(|e| RlError::Constraint(e.to_string()))?;
        }
        Ok(EnvAction { delta, gripper: None })
    }

    pub fn normalize_action(&self, delta: &[f64; 6]) -> [f64; 6] {
        let mut out = [0.0; 6];
        for j in 0..ACT_DIM {
            out[j] = (delta[j] / self.action_limit[j]).clamp(-1.0, 1.0);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub critic: f64,
    pub actor: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub q_mean: f64,
}

/// Stacked batch arrays in feature space.
pub struct Batch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub r: Array1<f64>,
    pub s2: Array2<f64>,
    pub done: Array1<f64>,
}

impl Batch {
    pub fn from_transitions(features: &Standardization, ts: &[Transition]) -> Result<Batch, RlError> {
        let d = features.center.len();
        let n = ts.len();
        let mut s = Array2::zeros((n, d));
        let mut s2 = Array2::zeros((n, d));
        let mut a = Array2::zeros((n, ACT_DIM));
        let mut r = Array1::zeros(n);
        let mut done = Array1::zeros(n);
        for (i, t) in ts.iter().enumerate() {
            if t.obs.len() != d || t.next_obs.len() != d {
                return Err(RlError::DimensionMismatch { expected: d, got: t.obs.len() });
            }
            s.row_mut(i).assign(&Array1::from(featurize(features, &t.obs)));
            s2.row_mut(i).assign(&Array1::from(featurize(features, &t.next_obs)));
            a.row_mut(i).assign(&Array1::from(t.action.to_vec()));
            r[i] = t.reward;
            done[i] = if t.done { 1.0 } else { 0.0 };
        }
        Ok(Batch { s, a, r, s2, done })
    }
}

fn sa(s: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[s.view(), a.view()]).expect("matching rows")
}

/// `0.5 * mean((Q(s, a) - y)^2)` and its parameter gradient.
pub fn critic_loss_and_grad(q: &Mlp, s: &Array2<f64>, a: &Array2<f64>, y: &Array1<f64>) -> (f64, Grads, Array1<f64>) {
    let n = s.nrows() as f64;
    let (out, cache) = q.forward_cached(&sa(s, a));
    let qv = out.column(0).to_owned();
    let diff = &qv - y;
    let loss = 0.5 * diff.mapv(|d| d * d).sum() / n;
    let dout = (diff / n).insert_axis(Axis(1));
    let (g, _) = q.backward(&cache, &dout);
    (loss, g, qv)
}

/// Actor loss `mean(alpha * log pi - min(Q1, Q2))` for fixed noise `eps`,
/// with the gradient w.r.t. the actor parameters.
pub fn actor_loss_and_grad(
    actor: &Mlp,
    q1: &Mlp,
    q2: &Mlp,
    s: &Array2<f64>,
    eps: &Array2<f64>,
    alpha: f64,
    log_std_min: f64,
    log_std_max: f64,
) -> (f64, Grads, Array1<f64>) {
    let n = s.nrows();
    let nf = n as f64;
    let (out, cache) = actor.forward_cached(s);
    let h = heads(out, log_std_min, log_std_max);
    let (a, logp) = squash(&h, eps);
    let x = sa(s, &a);
    let (o1, c1) = q1.forward_cached(&x);
    let (o2, c2) = q2.forward_cached(&x);
    let mask1 = Array2::from_shape_fn((n, 1), |(b, _)| if o1[(b, 0)] <= o2[(b, 0)] { 1.0 } else { 0.0 });
    let mask2 = mask1.mapv(|m| 1.0 - m);
    let qmin = Array1::from_shape_fn(n, |b| o1[(b, 0)].min(o2[(b, 0)]));
    let loss = (alpha * &logp - &qmin).sum() / nf;
    let (_, dx1) = q1.backward(&c1, &mask1);
    let (_, dx2) = q2.backward(&c2, &mask2);
    let d = s.ncols();
    let dq_da = &dx1.slice(s![.., d..]) + &dx2.slice(s![.., d..]);
    let mut dout = Array2::zeros((n, 2 * ACT_DIM));
    let span = 0.5 * (log_std_max - log_std_min);
    for b in 0..n {
        for j in 0..ACT_DIM {
            let aj = a[(b, j)];
            let one_m = 1.0 - aj * aj;
            let g_u = (alpha * 2.0 * aj / (one_m + SQUASH_EPS) - dq_da[(b, j)]) * one_m / nf;
            let sigma = h.log_std[(b, j)].exp();
            let g_logstd = -alpha / nf + g_u * sigma * eps[(b, j)];
            let th = h.raw[(b, j)].tanh();
            dout[(b, j)] = g_u;
            dout[(b, ACT_DIM + j)] = g_logstd * span * (1.0 - th * th);
        }
    }
    let (g, _) = actor.backward(&cache, &dout);
    (loss, g, logp)
}

/// Full learner state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sac {
    pub cfg: TrainConfig,
    pub policy: Policy,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub log_alpha: f64,
    opt_actor: Adam,
    opt_q1: Adam,
    opt_q2: Adam,
    opt_alpha: ScalarAdam,
    pub updates: u64,
}

impl Sac {
    pub fn new(
        cfg: TrainConfig,
        features: Standardization,
        action_limit: [f64; 6],
        rng: &mut impl Rng,
    ) -> Result<Self, RlError> {
        cfg.validate()?;
        let d = features.center.len();
        if d == 0 || features.scale.len() != d {
            return Err(RlError::InvalidConfig("feature standardisation is empty or ragged".into()));
        }
        let h = cfg.hidden;
        let actor = Mlp::new(&[d, h, h, 2 * ACT_DIM], Some(1e-3), rng);
        let q1 = Mlp::new(&[d + ACT_DIM, h, h, 1], Some(3e-3), rng);
        let q2 = Mlp::new(&[d + ACT_DIM, h, h, 1], Some(3e-3), rng);
        let policy = Policy {
            features,
            action_limit,
            actor: actor.clone(),
            log_std_min: cfg.log_std_min,
            log_std_max: cfg.log_std_max,
        };
        Ok(Sac {
            opt_actor: Adam::new(&actor, cfg.actor_lr),
            opt_q1: Adam::new(&q1, cfg.critic_lr),
            opt_q2: Adam::new(&q2, cfg.critic_lr),
            opt_alpha: ScalarAdam::new(cfg.alpha_lr),
            log_alpha: cfg.init_alpha.ln(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            policy,
            cfg,
            updates: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn batch(&self, ts: &[Transition]) -> Result<Batch, RlError> {
        Batch::from_transitions(&self.policy.features, ts)
    }

    /// Clipped double-Q Bellman targets.
    pub fn targets(&self, b: &Batch, rng: &mut impl Rng) -> Array1<f64> {
        let n = b.s2.nrows();
        let h = heads(self.policy.actor.forward(&b.s2), self.cfg.log_std_min, self.cfg.log_std_max);
        let eps = normal_matrix(n, ACT_DIM, rng);
        let (a2, logp2) = squash(&h, &eps);
        let x2 = sa(&b.s2, &a2);
        let t1 = self.q1_target.forward(&x2);
        let t2 = self.q2_target.forward(&x2);
        let alpha = self.alpha();
        Array1::from_shape_fn(n, |i| {
            let v = t1[(i, 0)].min(t2[(i, 0)]) - alpha * logp2[i];
            b.r[i] + self.cfg.gamma * (1.0 - b.done[i]) * v
        })
    }

    /// One gradient step on critics, actor and temperature, then target
    /// smoothing.
    pub fn update(&mut self, ts: &[Transition], rng: &mut impl Rng) -> Result<Losses, RlError> {
        let b = self.batch(ts)?;
        let id = self.updates;
        let y = self.targets(&b, rng);
        let (l1, g1, qv) = critic_loss_and_grad(&self.q1, &b.s, &b.a, &y);
        let (l2, g2, _) = critic_loss_and_grad(&self.q2, &b.s, &b.a, &y);
        if !(l1.is_finite() && l2.is_finite() && g1.is_finite() && g2.is_finite()) {
            return Err(RlError::NonFinite { what: "critic loss", batch_id: id });
        }
        self.opt_q1.step(&mut self.q1, &g1);
        self.opt_q2.step(&mut self.q2, &g2);

        let n = b.s.nrows();
        let eps = normal_matrix(n, ACT_DIM, rng);
        let alpha = self.alpha();
        let (la, ga, logp) = actor_loss_and_grad(
            &self.policy.actor,
            &self.q1,
            &self.q2,
            &b.s,
            &eps,
            alpha,
            self.cfg.log_std_min,
            self.cfg.log_std_max,
        );
        if !(la.is_finite() && ga.is_finite()) {
            return Err(RlError::NonFinite { what: "actor loss", batch_id: id });
        }
        self.opt_actor.step(&mut self.policy.actor, &ga);

        let mean_logp = logp.mean().unwrap_or(0.0);
        let target = self.cfg.entropy_target();
        let alpha_loss = -self.log_alpha * (mean_logp + target);
        if self.cfg.auto_alpha {
            self.opt_alpha.step(&mut self.log_alpha, -(mean_logp + target));
            self.log_alpha = self.log_alpha.clamp(-12.0, 2.0);
        }
        self.q1_target.soft_update(&self.q1, self.cfg.tau);
        self.q2_target.soft_update(&self.q2, self.cfg.tau);
        self.updates += 1;
        Ok(Losses { critic: l1 + l2, actor: la, alpha: alpha_loss, entropy: -mean_logp, q_mean: qv.mean().unwrap_or(0.0) })
    }

    /// `min(Q1, Q2)` at the policy mean for each feature-space row.
    pub fn q_at_policy_mean(&self, feats: &Array2<f64>) -> Array1<f64> {
        let h = heads(self.policy.actor.forward(feats), self.cfg.log_std_min, self.cfg.log_std_max);
        let a = h.mu.mapv(f64::tanh);
        let x = sa(feats, &a);
        let o1 = self.q1.forward(&x);
        let o2 = self.q2.forward(&x);
        Array1::from_shape_fn(feats.nrows(), |i| o1[(i, 0)].min(o2[(i, 0)]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::buffer::Source;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn features(d: usize) -> Standardization {
        Standardization { center: vec![0.0; d], scale: vec![1.0; d], bias: 0.0 }
    }

    fn batch(n: usize, d: usize, rng: &mut impl Rng, reward: f64, done: bool) -> Vec<Transition> {
        (0..n)
            .map(|_| Transition {
                obs: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                action: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
                reward,
                next_obs: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                done,
                success: done && reward == 1.0,
                source: Source::Policy,
            })
            .collect()
    }

    #[test]
    fn deterministic_act_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sac = Sac::new(TrainConfig::default(), features(4), [0.01; 6], &mut rng).unwrap();
        let obs = Observation { proprio: vec![0.1, 0.2], scene: vec![0.3, 0.4], step_index: 0 };
        let a = sac.policy.act(&obs, None, &Vec3::zeros(), ActMode::Deterministic, &mut rng).unwrap();
        let b = sac.policy.act(&obs, None, &Vec3::zeros(), ActMode::Deterministic, &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(a.delta.iter().all(|d| d.abs() <= 0.01));
    }

    #[test]
    fn constrained_act_clips_outward_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sac = Sac::new(TrainConfig::default(), features(2), [0.01; 6], &mut rng).unwrap();
        // Bias the mean hard toward +x.
        let last = sac.policy.actor.layers.last_mut().unwrap();
        last.w.fill(0.0);
        last.b.fill(0.0);
        last.b[0] = 5.0;
        let b = SpatialConstraint::new(Vec3::zeros(), Vec3::repeat(0.02)).unwrap();
        let tcp = Vec3::new(0.01, 0.0, 0.0);
        let obs = Observation { proprio: vec![0.0], scene: vec![0.0], step_index: 0 };
        let free = sac.policy.act(&obs, None, &tcp, ActMode::Deterministic, &mut rng).unwrap();
        assert!(free.delta[0] > 0.009);
        let a = sac.policy.act(&obs, Some(&b), &tcp, ActMode::Deterministic, &mut rng).unwrap();
        assert_eq!(a.delta[0], 0.0);
    }

    #[test]
    fn done_zero_reward_targets_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sac = Sac::new(TrainConfig::default(), features(3), [0.01; 6], &mut rng).unwrap();
        let ts = batch(16, 3, &mut rng, 0.0, true);
        let y = sac.targets(&sac.batch(&ts).unwrap(), &mut rng);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixed_batch_td_loss_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sac = Sac::new(TrainConfig::default(), features(3), [0.01; 6], &mut rng).unwrap();
        let mut ts = batch(32, 3, &mut rng, 0.0, false);
        for t in ts.iter_mut().step_by(3) {
            t.reward = 1.0;
            t.done = true;
            t.success = true;
        }
        let first = sac.update(&ts, &mut rng).unwrap().critic;
        let mut last = first;
        for _ in 0..199 {
            last = sac.update(&ts, &mut rng).unwrap().critic;
        }
        assert!(last <= 0.5 * first, "{first} -> {last}");
    }
}
