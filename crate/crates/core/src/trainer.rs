//! Synchronous advantage actor-critic with GAE and Adam, plus REINFORCE.

use std::collections::VecDeque;
use std::io::Write;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvSpec, TrialOutcome};
use crate::error::{Error, Result};
use crate::nets::{greedy_action, log_softmax, sample_action, Agent, AgentSpec, CoreState, Gradients, ParamSet, StepCache, StepGrad};
use crate::rng::{self, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    A2c,
    Reinforce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// One update at the end of every trial.
    PerTrial,
    /// An update every `n` steps, bootstrapping from the value of the next state.
    Horizon(usize),
}

/// Trailing-window success criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Criterion {
    #[serde(default = "d_window")]
    pub window: usize,
    #[serde(default = "d_threshold")]
    pub threshold: f64,
}

impl Default for Criterion {
    fn default() -> Self {
        Self {
            window: d_window(),
            threshold: d_threshold(),
        }
    }
}

fn d_window() -> usize {
    500
}
fn d_threshold() -> f64 {
    0.8
}
fn d_gamma() -> f64 {
    0.98
}
fn d_lambda() -> f64 {
    0.95
}
fn d_lr() -> f64 {
    1e-3
}
fn d_entropy() -> f64 {
    0.01
}
fn d_value() -> f64 {
    0.5
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_clip() -> f64 {
    5.0
}
fn d_update() -> UpdateMode {
    UpdateMode::PerTrial
}
fn d_trials() -> usize {
    20_000
}
fn d_seeds() -> usize {
    5
}
fn d_algorithm() -> Algorithm {
    Algorithm::A2c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_entropy")]
    pub entropy_coef: f64,
    #[serde(default = "d_value")]
    pub value_coef: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default = "d_update")]
    pub update: UpdateMode,
    #[serde(default = "d_trials")]
    pub n_trials: usize,
    #[serde(default = "d_seeds")]
    pub n_seeds: usize,
    #[serde(default = "d_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub criterion: Criterion,
    /// End the run as soon as the criterion is met.
    #[serde(default)]
    pub stop_at_criterion: bool,
    /// Write a checkpoint every this many trials; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| {
            Err(Error::Config {
                field: format!("train.{field}"),
                msg: msg.into(),
            })
        };
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda", "must be in [0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.entropy_coef >= 0.0) {
            return bad("entropy_coef", "must be non-negative");
        }
        if !(self.value_coef >= 0.0) {
            return bad("value_coef", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "adam betas must be in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm", "must be non-negative");
        }
        if self.update == UpdateMode::Horizon(0) {
            return bad("update", "horizon must be at least one step");
        }
        if matches!(self.update, UpdateMode::Horizon(_)) && self.algorithm == Algorithm::Reinforce {
            return bad("update", "reinforce needs full trials");
        }
        if self.criterion.window == 0 {
            return bad("criterion.window", "must be positive");
        }
        Ok(())
    }
}

/// `A_t = sum_l (gamma*lambda)^l delta_{t+l}` with `delta_t = r_t + gamma V_{t+1} - V_t`.
/// `values` has one more entry than `rewards`: the bootstrap value.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::Length(format!(
            "gae needs {} values for {} rewards, got {}",
            rewards.len() + 1,
            rewards.len(),
            values.len()
        )));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

/// Discounted return-to-go with a bootstrap value after the last step.
pub fn discounted_returns(rewards: &[f64], gamma: f64, bootstrap: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// One stretch of agent-environment interaction to learn from.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub caches: Vec<StepCache>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub entropies: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Value of the state after the last step; 0 when the trial ended.
    pub bootstrap: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.caches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }

    pub fn push(&mut self, cache: StepCache, action: usize, log_prob: f64, entropy: f64, reward: f64) {
        self.values.push(cache.value);
        self.caches.push(cache);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.entropies.push(entropy);
        self.rewards.push(reward);
    }

    fn check(&self) -> Result<()> {
        let n = self.caches.len();
        if [self.actions.len(), self.log_probs.len(), self.entropies.len(), self.values.len(), self.rewards.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::Length("trajectory sequences differ in length".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

/// Per-step weights of the loss `sum_t [-w_t log pi(a_t) + c_v (V_t - R_t)^2 - c_e H_t]`.
struct LossTerms {
    weights: Vec<f64>,
    targets: Option<Vec<f64>>,
}

fn loss_grads(agent: &Agent, traj: &Trajectory, terms: &LossTerms, cfg: &TrainConfig) -> (Vec<StepGrad>, LossMetrics) {
    let mut m = LossMetrics::default();
    let grads = traj
        .caches
        .iter()
        .enumerate()
        .map(|(t, c)| {
            let lp = log_softmax(&c.logits);
            let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            let h = -p.iter().zip(&lp).map(|(a, b)| a * b).sum::<f64>();
            let w = terms.weights[t];
            let a = traj.actions[t];
            m.policy_loss -= w * lp[a];
            m.entropy += h;
            let dlogits = (0..agent.n_actions())
                .map(|j| {
                    let onehot = if j == a { 1.0 } else { 0.0 };
                    -w * (onehot - p[j]) + cfg.entropy_coef * p[j] * (lp[j] + h)
                })
                .collect();
            let dvalue = match &terms.targets {
                Some(r) => {
                    let e = c.value - r[t];
                    m.value_loss += e * e;
                    2.0 * cfg.value_coef * e
                }
                None => 0.0,
            };
            StepGrad { dlogits, dvalue }
        })
        .collect();
    (grads, m)
}

fn finish_grads(agent: &Agent, traj: &Trajectory, terms: LossTerms, cfg: &TrainConfig) -> Result<(Gradients, LossMetrics)> {
    traj.check()?;
    let (sg, mut m) = loss_grads(agent, traj, &terms, cfg);
    let g = agent.backward(&traj.caches, &sg)?;
    m.grad_norm = g.global_norm();
    Ok((g, m))
}

/// Gradients of the A2C loss for one trajectory (before clipping).
pub fn a2c_gradients(agent: &Agent, traj: &Trajectory, cfg: &TrainConfig) -> Result<(Gradients, LossMetrics)> {
    let mut values = traj.values.clone();
    values.push(traj.bootstrap);
    let adv = compute_gae(&traj.rewards, &values, cfg.gamma, cfg.lambda)?;
    let targets = adv.iter().zip(&traj.values).map(|(a, v)| a + v).collect();
    finish_grads(
        agent,
        traj,
        LossTerms {
            weights: adv,
            targets: Some(targets),
        },
        cfg,
    )
}

/// Gradients of the REINFORCE loss (return-to-go weights, no critic).
pub fn reinforce_gradients(agent: &Agent, traj: &Trajectory, cfg: &TrainConfig) -> Result<(Gradients, LossMetrics)> {
    let g = discounted_returns(&traj.rewards, cfg.gamma, 0.0);
    finish_grads(
        agent,
        traj,
        LossTerms {
            weights: g,
            targets: None,
        },
        cfg,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let z: Vec<Vec<f64>> = params.params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { t: 0, m: z.clone(), v: z }
    }
}

/// Bias-corrected Adam step on trainable parameters.
pub fn adam_step(st: &mut AdamState, params: &mut ParamSet, grads: &Gradients, cfg: &TrainConfig) -> Result<()> {
    if grads.grads.len() != params.params.len() || st.m.len() != params.params.len() {
        return Err(Error::Shape {
            what: "adam parameter count",
            expected: params.params.len(),
            got: grads.grads.len(),
        });
    }
    st.t += 1;
    let t = st.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let g = &grads.grads[i];
        if g.len() != p.data.len() {
            return Err(Error::Shape {
                what: "adam gradient",
                expected: p.data.len(),
                got: g.len(),
            });
        }
        let (m, v) = (&mut st.m[i], &mut st.v[i]);
        for j in 0..g.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p.data[j] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

fn apply_update(
    agent: &mut Agent,
    opt: &mut AdamState,
    traj: &Trajectory,
    cfg: &TrainConfig,
    trial: usize,
) -> Result<LossMetrics> {
    let (mut g, m) = match cfg.algorithm {
        Algorithm::A2c => a2c_gradients(agent, traj, cfg)?,
        Algorithm::Reinforce => reinforce_gradients(agent, traj, cfg)?,
    };
    let loss = m.policy_loss + cfg.value_coef * m.value_loss - cfg.entropy_coef * m.entropy;
    if !loss.is_finite() || !g.is_finite() {
        return Err(Error::NonFiniteLoss {
            trial,
            detail: format!(
                "policy {} value {} entropy {} grad norm {}",
                m.policy_loss, m.value_loss, m.entropy, m.grad_norm
            ),
        });
    }
    if cfg.clip_norm > 0.0 {
        g.clip_global_norm(cfg.clip_norm);
    }
    adam_step(opt, &mut agent.params, &g, cfg)?;
    Ok(m)
}

/// One A2C update on `traj`; returns the loss metrics.
pub fn a2c_update(agent: &mut Agent, opt: &mut AdamState, traj: &Trajectory, cfg: &TrainConfig) -> Result<LossMetrics> {
    let cfg = TrainConfig {
        algorithm: Algorithm::A2c,
        ..cfg.clone()
    };
    apply_update(agent, opt, traj, &cfg, 0)
}

/// One REINFORCE update on a full trial.
pub fn reinforce_update(agent: &mut Agent, opt: &mut AdamState, traj: &Trajectory, cfg: &TrainConfig) -> Result<LossMetrics> {
    let cfg = TrainConfig {
        algorithm: Algorithm::Reinforce,
        ..cfg.clone()
    };
    apply_update(agent, opt, traj, &cfg, 0)
}

/// One row of the learning-curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub reward: f64,
    pub length: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

pub const CURVE_HEADER: &str = "trial,reward,length,policy_loss,value_loss,entropy,seed,config_hash";

pub fn write_curve_row<W: Write>(out: &mut W, r: &TrialRecord, seed: u64, hash: &str) -> Result<()> {
    writeln!(
        out,
        "{},{},{},{},{},{},{},{}",
        r.trial, r.reward, r.length, r.policy_loss, r.value_loss, r.entropy, seed, hash
    )?;
    Ok(())
}

/// First trial (1-based) at which the trailing window mean reaches the threshold.
pub fn trials_to_criterion(rewards: &[f64], c: Criterion) -> Option<usize> {
    let mut tracker = CriterionTracker::new(c);
    rewards.iter().find_map(|&r| tracker.push(r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionTracker {
    criterion: Criterion,
    recent: VecDeque<f64>,
    n: usize,
    met: Option<usize>,
}

impl CriterionTracker {
    pub fn new(criterion: Criterion) -> Self {
        Self {
            criterion,
            recent: VecDeque::with_capacity(criterion.window),
            n: 0,
            met: None,
        }
    }

    /// Feed one trial reward; returns the trial index the first time the
    /// criterion is met.
    pub fn push(&mut self, reward: f64) -> Option<usize> {
        self.n += 1;
        self.recent.push_back(reward);
        if self.recent.len() > self.criterion.window {
            self.recent.pop_front();
        }
        if self.met.is_none() && self.recent.len() == self.criterion.window {
            // summed in order each time so the result is independent of history
            let mean = self.recent.iter().sum::<f64>() / self.criterion.window as f64;
            if mean >= self.criterion.threshold {
                self.met = Some(self.n);
                return self.met;
            }
        }
        None
    }

    pub fn met(&self) -> Option<usize> {
        self.met
    }

    pub fn trailing_mean(&self) -> f64 {
        if self.recent.is_empty() {
            0.0
        } else {
            self.recent.iter().sum::<f64>() / self.recent.len() as f64
        }
    }
}

/// Everything needed to resume a run bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub trial: usize,
    pub params: ParamSet,
    pub adam: AdamState,
    pub env_rng: RngState,
    pub env_trial_id: u64,
    pub policy_rng: RngState,
    pub tracker: CriterionTracker,
}

/// A training run: one agent, one environment, one seed.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub agent: Agent,
    pub env: Env,
    pub config: TrainConfig,
    pub seed: u64,
    opt: AdamState,
    policy_rng: ChaCha8Rng,
    trial: usize,
    tracker: CriterionTracker,
}

impl Trainer {
    /// The run seed drives the environment, parameter init and action sampling
    /// through independent streams.
    pub fn new(env_spec: &EnvSpec, agent_spec: &AgentSpec, config: &TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut es = env_spec.clone();
        es.seed = seed;
        let env = Env::new(es)?;
        let agent = Agent::new(agent_spec.clone(), env.obs_dim(), env.n_actions(), seed)?;
        let opt = AdamState::new(&agent.params);
        Ok(Self {
            agent,
            env,
            config: config.clone(),
            seed,
            opt,
            policy_rng: rng::derived(seed, 2),
            trial: 0,
            tracker: CriterionTracker::new(config.criterion),
        })
    }

    pub fn trial(&self) -> usize {
        self.trial
    }

    pub fn criterion_met(&self) -> Option<usize> {
        self.tracker.met()
    }

    pub fn trailing_mean(&self) -> f64 {
        self.tracker.trailing_mean()
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            trial: self.trial,
            params: self.agent.params.clone(),
            adam: self.opt.clone(),
            env_rng: self.env.rng_state(),
            env_trial_id: self.env.trial_id(),
            policy_rng: RngState::capture(&self.policy_rng),
            tracker: self.tracker.clone(),
        }
    }

    pub fn restore(&mut self, st: &TrainerState) -> Result<()> {
        self.agent.set_params(st.params.clone())?;
        if st.adam.m.len() != st.params.params.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.opt = st.adam.clone();
        self.env.set_rng_state(&st.env_rng)?;
        self.env.set_trial_id(st.env_trial_id);
        self.policy_rng = st.policy_rng.restore()?;
        self.trial = st.trial;
        self.tracker = st.tracker.clone();
        Ok(())
    }

    /// Roll out one trial, updating per the configured mode.
    pub fn run_trial(&mut self) -> Result<TrialRecord> {
        let mut st = self.agent.initial_state();
        let mut obs = self.env.reset().observation;
        let mut traj = Trajectory::default();
        let mut metrics = LossMetrics::default();
        let mut total = 0.0;
        let mut length = 0;
        let trial = self.trial + 1;
        loop {
            let cache = self.agent.step(&mut st, &obs)?;
            let s = sample_action(&cache.logits, &mut self.policy_rng);
            let res = self.env.step(s.action)?;
            total += res.reward;
            length += 1;
            traj.push(cache, s.action, s.log_prob, s.entropy, res.reward);
            if res.done {
                traj.bootstrap = 0.0;
                self.update(&traj, &mut metrics, trial)?;
                break;
            }
            obs = res.observation;
            if let UpdateMode::Horizon(n) = self.config.update {
                if traj.len() >= n {
                    let mut peek = st.clone();
                    traj.bootstrap = self.agent.step(&mut peek, &obs)?.value;
                    self.update(&traj, &mut metrics, trial)?;
                    traj = Trajectory::default();
                }
            }
        }
        self.trial = trial;
        self.tracker.push(total);
        Ok(TrialRecord {
            trial,
            reward: total,
            length,
            policy_loss: metrics.policy_loss,
            value_loss: metrics.value_loss,
            entropy: metrics.entropy,
        })
    }

    fn update(&mut self, traj: &Trajectory, acc: &mut LossMetrics, trial: usize) -> Result<()> {
        if traj.is_empty() {
            return Ok(());
        }
        let m = apply_update(&mut self.agent, &mut self.opt, traj, &self.config, trial)?;
        acc.policy_loss += m.policy_loss;
        acc.value_loss += m.value_loss;
        acc.entropy += m.entropy;
        acc.grad_norm = acc.grad_norm.max(m.grad_norm);
        Ok(())
    }

    /// Train until `config.n_trials` (or the criterion, if configured).
    /// `on_trial` sees every record and may write checkpoints.
    pub fn run<F>(&mut self, mut on_trial: F) -> Result<Vec<TrialRecord>>
    where
        F: FnMut(&Trainer, &TrialRecord) -> Result<()>,
    {
        let mut out = Vec::new();
        while self.trial < self.config.n_trials {
            let r = self.run_trial()?;
            on_trial(self, &r)?;
            out.push(r);
            if self.config.stop_at_criterion && self.tracker.met().is_some() {
                break;
            }
        }
        Ok(out)
    }
}

/// Action selection during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPolicy {
    Greedy,
    /// Sample from the policy with a dedicated generator seed.
    Sample(u64),
}

/// Evaluation result for one environment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub outcomes: Vec<TrialOutcome>,
    /// Per-trial core activity (steps x units), when recorded.
    pub activity: Vec<Vec<Vec<f64>>>,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        self.outcomes.iter().filter(|o| o.correct()).count() as f64 / self.outcomes.len() as f64
    }
}

/// Greedy policy rollouts without parameter updates.
pub fn evaluate(agent: &Agent, env_spec: &EnvSpec, n_trials: usize, record_activity: bool) -> Result<EvalResult> {
    evaluate_with(agent, env_spec, n_trials, record_activity, EvalPolicy::Greedy)
}

/// Rollouts without parameter updates under the given action policy.
pub fn evaluate_with(
    agent: &Agent,
    env_spec: &EnvSpec,
    n_trials: usize,
    record_activity: bool,
    policy: EvalPolicy,
) -> Result<EvalResult> {
    let mut sampler = match policy {
        EvalPolicy::Sample(seed) => Some(rng::derived(seed, 3)),
        EvalPolicy::Greedy => None,
    };
    let mut env = Env::new(env_spec.clone())?;
    if env.obs_dim() != agent.obs_dim() || env.n_actions() != agent.n_actions() {
        return Err(Error::Shape {
            what: "agent/environment interface",
            expected: agent.obs_dim(),
            got: env.obs_dim(),
        });
    }
    let mut res = EvalResult {
        outcomes: Vec::with_capacity(n_trials),
        activity: Vec::new(),
    };
    for _ in 0..n_trials {
        let mut st: CoreState = agent.initial_state();
        let mut obs = env.reset().observation;
        let mut act = Vec::new();
        loop {
            let c = agent.step(&mut st, &obs)?;
            if record_activity {
                act.push(c.core_activity().to_vec());
            }
            let a = match sampler.as_mut() {
                Some(r) => sample_action(&c.logits, r).action,
                None => greedy_action(&c.logits),
            };
            let r = env.step(a)?;
            if r.done {
                break;
            }
            obs = r.observation;
        }
        res.outcomes.push(env.last_outcome().cloned().expect("finished trial"));
        if record_activity {
            res.activity.push(act);
        }
    }
    Ok(res)
}
