//! Offline Q-learning (DQN, DDQN, CQL, robust variants) and online adaptation.

mod loss;
mod metrics;
mod replay;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks_eval::{eval_seeds, evaluate, AttackSpec, EvalError, EvalReport, GreedyPolicy, Normalizer};
use crate::datasets::{Dataset, DatasetError, Transition};
use crate::diffcore::{Adam, AdamConfig, DiffError, Graph, Tensor};
use crate::mop_policy::{apply_freeze, Phase, PolicyError, QNet};
use crate::seeding::{self, streams};
use crate::sim::{EnvConfig, Highway, MetaAction, SimError, NUM_ACTIONS};
use crate::teacher::episode_seed;

pub use loss::{
    bootstrap_values, build_loss, cql_penalty, cross_entropy, normalized_l2_distances, pgd_l2, prepare, td_loss,
    td_targets, Batch, Bootstrap, LossNodes, LossSpec, Prepared,
};
pub use metrics::{MetricsLog, MetricsRow, METRICS_HEADER};
pub use replay::ReplayBuffer;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: String },
    #[error("robust term needs dataset normalization ranges")]
    MissingRanges,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        TrainError::Policy(PolicyError::Diff(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Dqn,
    Ddqn,
    Cql,
    Rapid,
    RapidNoRobust,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] =
        [Algorithm::Dqn, Algorithm::Ddqn, Algorithm::Cql, Algorithm::Rapid, Algorithm::RapidNoRobust];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Dqn => "dqn",
            Algorithm::Ddqn => "ddqn",
            Algorithm::Cql => "cql",
            Algorithm::Rapid => "rapid",
            Algorithm::RapidNoRobust => "rapid_no_robust",
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            Algorithm::Dqn => 5e-3,
            _ => 5e-4,
        }
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            Algorithm::Cql => 64,
            _ => 32,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub gamma: f64,
    /// Defaults to 5e-3 for dqn and 5e-4 otherwise.
    pub learning_rate: Option<f64>,
    /// Defaults to 64 for cql and 32 otherwise.
    pub batch_size: Option<usize>,
    pub target_update_interval: usize,
    pub total_steps: usize,
    /// Progress-report granularity.
    pub steps_per_epoch: usize,
    pub buffer_capacity: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub alpha: f64,
    pub beta: f64,
    pub eps_train: f64,
    pub inner_steps: usize,
    pub inner_step_size: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    /// Fill `wall_ms`; off by default so metrics files are reproducible.
    pub record_wall_time: bool,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: usize,
    /// Online phase: environment steps before the first update (at least one batch).
    pub learning_starts: usize,
    /// Online phase: use the configured algorithm's full objective instead of plain DQN.
    pub online_extra_terms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Rapid,
            gamma: 0.99,
            learning_rate: None,
            batch_size: None,
            target_update_interval: 50,
            total_steps: 10_000,
            steps_per_epoch: 100,
            buffer_capacity: 100_000,
            eval_every: 1000,
            eval_episodes: 10,
            alpha: 1.0,
            beta: 0.5,
            eps_train: 0.1,
            inner_steps: 10,
            inner_step_size: 0.01,
            max_grad_norm: Some(10.0),
            seed: 0,
            record_wall_time: false,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 2000,
            learning_starts: 0,
            online_extra_terms: false,
        }
    }
}

impl TrainConfig {
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        Self { algorithm, ..Self::default() }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or_else(|| self.algorithm.default_learning_rate())
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or_else(|| self.algorithm.default_batch_size())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be >= 0");
        }
        if !(self.learning_rate() > 0.0) || self.batch_size() == 0 {
            return bad("learning rate and batch size must be positive");
        }
        if self.target_update_interval == 0 || self.eval_every == 0 || self.steps_per_epoch == 0 {
            return bad("target update interval, eval cadence and epoch length must be positive");
        }
        if self.eval_episodes == 0 || self.buffer_capacity == 0 {
            return bad("eval episodes and buffer capacity must be positive");
        }
        if !(self.eps_train >= 0.0) || !(self.inner_step_size >= 0.0) {
            return bad("eps_train and inner_step_size must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon bounds must lie in [0, 1]");
        }
        Ok(())
    }

    /// Objective of `algorithm` with this config's weights.
    pub fn loss_spec(&self, algorithm: Algorithm) -> LossSpec {
        let (bootstrap, alpha, beta) = match algorithm {
            Algorithm::Dqn => (Bootstrap::Max, 0.0, 0.0),
            Algorithm::Ddqn => (Bootstrap::Double, 0.0, 0.0),
            Algorithm::Cql => (Bootstrap::Double, self.alpha, 0.0),
            Algorithm::Rapid => (Bootstrap::Max, self.alpha, self.beta),
            Algorithm::RapidNoRobust => (Bootstrap::Max, self.alpha, 0.0),
        };
        LossSpec {
            bootstrap,
            gamma: self.gamma,
            alpha,
            beta,
            eps_train: self.eps_train,
            inner_steps: self.inner_steps,
            inner_step_size: self.inner_step_size,
        }
    }

    /// Exploration rate after `t` environment steps.
    pub fn epsilon(&self, t: usize) -> f64 {
        if self.epsilon_decay_steps == 0 {
            return self.epsilon_end;
        }
        if t >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let frac = t as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Loss component values of one update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub td: f64,
    pub cql: f64,
    pub robust: f64,
}

/// Online network, target snapshot and optimizer state.
pub struct Learner {
    pub net: QNet,
    pub target: QNet,
    pub adam: Adam,
    pub updates: usize,
    target_update_interval: usize,
    max_grad_norm: Option<f64>,
}

impl Learner {
    pub fn new(net: QNet, learning_rate: f64, target_update_interval: usize, max_grad_norm: Option<f64>) -> Self {
        let adam = Adam::new(AdamConfig::with_lr(learning_rate), net.params());
        let target = net.clone();
        Self { net, target, adam, updates: 0, target_update_interval, max_grad_norm }
    }

    /// Loss values of `batch` under `spec` without updating anything.
    pub fn evaluate_loss(&self, batch: &Batch, spec: &LossSpec, norm: Option<&Normalizer>) -> Result<LossValues, TrainError> {
        let prepared = prepare(&self.net, &self.target, batch, spec, norm)?;
        let mut g = Graph::without_param_grads();
        let nodes = build_loss(&mut g, &self.net, batch, &prepared, spec)?;
        Ok(read_values(&g, &nodes))
    }

    /// One gradient step; refreshes the target network on the configured cadence.
    pub fn update(&mut self, batch: &Batch, spec: &LossSpec, norm: Option<&Normalizer>) -> Result<LossValues, TrainError> {
        let step = self.updates + 1;
        let prepared = prepare(&self.net, &self.target, batch, spec, norm)?;
        let mut g = Graph::new();
        let nodes = build_loss(&mut g, &self.net, batch, &prepared, spec)?;
        let values = read_values(&g, &nodes);
        if !values.total.is_finite() {
            return Err(TrainError::NonFinite { step, what: "loss".into() });
        }
        let mut grads = g.backward(nodes.total)?.into_param_grads(self.net.params().len());
        if let Some(max) = self.max_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        self.adam.step(self.net.params_mut(), &grads).map_err(|e| match e {
            DiffError::NonFiniteGradient(name) => TrainError::NonFinite { step, what: format!("gradient of {name}") },
            other => other.into(),
        })?;
        if let Some(m) = self.net.as_mop_mut() {
            m.clamp_gate();
        }
        self.updates = step;
        if step.is_multiple_of(self.target_update_interval) {
            self.sync_target()?;
        }
        Ok(values)
    }

    pub fn sync_target(&mut self) -> Result<(), TrainError> {
        self.target.params_mut().copy_values_from(self.net.params())?;
        Ok(())
    }
}

fn read_values(g: &Graph, n: &LossNodes) -> LossValues {
    LossValues {
        total: g.value(n.total).item(),
        td: g.value(n.td).item(),
        cql: n.cql.map_or(0.0, |c| g.value(c).item()),
        robust: n.robust.map_or(0.0, |r| g.value(r).item()),
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max`.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max && norm.is_finite() {
        let k = max / norm;
        for t in grads.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

#[derive(Default)]
struct Window {
    n: usize,
    td: f64,
    cql: f64,
    robust: f64,
}

impl Window {
    fn push(&mut self, v: &LossValues) {
        self.n += 1;
        self.td += v.td;
        self.cql += v.cql;
        self.robust += v.robust;
    }

    fn take(&mut self) -> (f64, f64, f64) {
        let n = self.n.max(1) as f64;
        let out = (self.td / n, self.cql / n, self.robust / n);
        *self = Window::default();
        out
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: MetricsLog,
    pub final_eval: Option<EvalReport>,
}

/// Greedy evaluation on the fixed evaluation seeds, shared by all trainers.
pub fn evaluate_greedy(env: &EnvConfig, net: &QNet, cfg: &TrainConfig) -> Result<EvalReport, TrainError> {
    let seeds = eval_seeds(cfg.seed, cfg.eval_episodes);
    Ok(evaluate(env, &mut GreedyPolicy::new(net), &seeds, &AttackSpec::none(), None)?)
}

/// Offline training on a fixed dataset. Applies the offline freeze mask to
/// mixture-of-policies networks.
pub fn offline_train(dataset: &Dataset, net: QNet, cfg: &TrainConfig) -> Result<(QNet, TrainOutcome), TrainError> {
    cfg.validate()?;
    let mut net = net;
    if let Some(m) = net.as_mop_mut() {
        apply_freeze(m, Phase::OfflineDistill);
    }
    let env = EnvConfig::from_id(dataset.env_id())?;
    let spec = cfg.loss_spec(cfg.algorithm);
    let norm = match dataset.ranges() {
        Some((lo, hi)) => Some(Normalizer::new(lo, hi)),
        None if spec.beta > 0.0 => return Err(TrainError::MissingRanges),
        None => None,
    };
    let vehicles = net.vehicles();
    let mut learner = Learner::new(net, cfg.learning_rate(), cfg.target_update_interval, cfg.max_grad_norm);
    let mut rng = seeding::rng(cfg.seed, streams::BATCHES);
    let mut log = MetricsLog::default();
    let mut window = Window::default();
    let mut final_eval = None;
    let start = Instant::now();
    for step in 1..=cfg.total_steps {
        let picked = dataset.sample_batch(cfg.batch_size(), &mut rng)?;
        let batch = Batch::from_transitions(&picked, vehicles)?;
        let v = learner.update(&batch, &spec, norm.as_ref())?;
        window.push(&v);
        if step % cfg.eval_every == 0 {
            let report = evaluate_greedy(&env, &learner.net, cfg)?;
            let (td, cql, robust) = window.take();
            log.rows.push(MetricsRow {
                step,
                loss_td: td,
                loss_cql: cql,
                loss_robust: robust,
                eval_return_mean: report.mean,
                eval_return_std: report.std,
                epsilon: 0.0,
                wall_ms: wall_ms(cfg, start),
            });
            final_eval = Some(report);
        }
    }
    Ok((learner.net, TrainOutcome { metrics: log, final_eval }))
}

fn wall_ms(cfg: &TrainConfig, start: Instant) -> u64 {
    if cfg.record_wall_time {
        start.elapsed().as_millis() as u64
    } else {
        0
    }
}

/// Online adaptation with epsilon-greedy rollouts and a FIFO replay buffer.
/// Applies the online freeze mask to mixture-of-policies networks.
pub fn online_adapt(env: &EnvConfig, net: QNet, cfg: &TrainConfig) -> Result<(QNet, TrainOutcome), TrainError> {
    cfg.validate()?;
    let mut net = net;
    if let Some(m) = net.as_mop_mut() {
        apply_freeze(m, Phase::OnlineAdapt);
    }
    let algorithm = if cfg.online_extra_terms { cfg.algorithm } else { Algorithm::Dqn };
    let spec = cfg.loss_spec(algorithm);
    let norm = Normalizer::from_encoder(net.encoder());
    let vehicles = net.vehicles();
    let batch_size = cfg.batch_size();
    let mut learner = Learner::new(net, cfg.learning_rate(), cfg.target_update_interval, cfg.max_grad_norm);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut explore = seeding::rng(cfg.seed, streams::EXPLORATION);
    let mut batches = seeding::rng(cfg.seed, streams::BATCHES);
    let mut episode = 0;
    let mut sim = Highway::new(env.clone(), episode_seed(cfg.seed, 0))?;
    let mut obs = sim.observe();
    let mut log = MetricsLog::default();
    let mut window = Window::default();
    let mut final_eval = None;
    let start = Instant::now();
    for t in 1..=cfg.total_steps {
        let epsilon = cfg.epsilon(t - 1);
        let a = if explore.random::<f64>() < epsilon {
            explore.random_range(0..NUM_ACTIONS)
        } else {
            learner.net.greedy_actions(&[&obs])?[0]
        };
        let step = sim.step(MetaAction::from_index(a).expect("valid action"))?;
        buffer.push(Transition { s: obs, a, r: step.reward, s_next: step.observation.clone(), done: step.done });
        obs = if step.done {
            episode += 1;
            sim.reset(episode_seed(cfg.seed, episode))
        } else {
            step.observation
        };
        if buffer.len() >= batch_size.max(cfg.learning_starts) {
            let picked = buffer.sample(batch_size, &mut batches);
            let batch = Batch::from_transitions(&picked, vehicles)?;
            let v = learner.update(&batch, &spec, Some(&norm))?;
            window.push(&v);
        }
        if t % cfg.eval_every == 0 {
            let report = evaluate_greedy(env, &learner.net, cfg)?;
            let (td, cql, robust) = window.take();
            log.rows.push(MetricsRow {
                step: t,
                loss_td: td,
                loss_cql: cql,
                loss_robust: robust,
                eval_return_mean: report.mean,
                eval_return_std: report.std,
                epsilon,
                wall_ms: wall_ms(cfg, start),
            });
            final_eval = Some(report);
        }
    }
    Ok((learner.net, TrainOutcome { metrics: log, final_eval }))
}
