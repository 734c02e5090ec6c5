use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mop_policy::{MopNet, QNet};
use crate::seeding::{self, derive_seed, streams};
use crate::sim::{EnvConfig, Highway, Observation, NUM_ACTIONS};

use super::{attack_batch, AttackSpec, EvalError, Normalizer};

/// Chooses actions for a batch of observations, one per running episode.
pub trait Policy {
    fn id(&self) -> String;
    /// `episodes[i]` is the episode index of `obs[i]`.
    fn act(&mut self, episodes: &[usize], obs: &[&Observation]) -> Result<Vec<usize>, EvalError>;
    /// Network used for gradient attacks, if any.
    fn q_net(&self) -> Option<&QNet> {
        None
    }
}

pub struct GreedyPolicy<'a> {
    pub net: &'a QNet,
    pub name: String,
}

impl<'a> GreedyPolicy<'a> {
    pub fn new(net: &'a QNet) -> Self {
        Self { net, name: net.arch().to_string() }
    }
}

impl Policy for GreedyPolicy<'_> {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn act(&mut self, _episodes: &[usize], obs: &[&Observation]) -> Result<Vec<usize>, EvalError> {
        Ok(self.net.greedy_actions(obs)?)
    }

    fn q_net(&self) -> Option<&QNet> {
        Some(self.net)
    }
}

/// Uniform random actions with an independent stream per episode.
pub struct RandomPolicy {
    seed: u64,
    rngs: HashMap<usize, ChaCha8Rng>,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self { seed, rngs: HashMap::new() }
    }
}

impl Policy for RandomPolicy {
    fn id(&self) -> String {
        "random".into()
    }

    fn act(&mut self, episodes: &[usize], _obs: &[&Observation]) -> Result<Vec<usize>, EvalError> {
        Ok(episodes
            .iter()
            .map(|&e| {
                let seed = self.seed;
                let rng = self.rngs.entry(e).or_insert_with(|| seeding::rng(derive_seed(seed, e as u64), streams::POLICY));
                rng.random_range(0..NUM_ACTIONS)
            })
            .collect())
    }
}

/// Episode seeds used by evaluation runs seeded with `seed`.
pub fn eval_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    let base = derive_seed(seed, streams::EVAL);
    (0..episodes as u64).map(|k| derive_seed(base, k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env_id: String,
    pub policy_id: String,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub attack: AttackSpec,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn new(env_id: String, policy_id: String, returns: Vec<f64>, attack: AttackSpec, seeds: Vec<u64>) -> Self {
        let (mean, std) = mean_std(&returns);
        Self { env_id, policy_id, returns, mean, std, attack, seeds, warnings: Vec::new() }
    }

    /// Pools several reports (e.g. trials) into one.
    pub fn pooled(reports: &[EvalReport]) -> Option<Self> {
        let first = reports.first()?;
        let returns = reports.iter().flat_map(|r| r.returns.iter().copied()).collect();
        let seeds = reports.iter().flat_map(|r| r.seeds.iter().copied()).collect();
        Some(Self::new(first.env_id.clone(), first.policy_id.clone(), returns, first.attack, seeds))
    }

    pub const CSV_HEADER: &'static str = "env,policy,attack,eps,episodes,mean,std";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.env_id,
            self.policy_id,
            self.attack.kind,
            self.attack.eps,
            self.returns.len(),
            self.mean,
            self.std
        )
    }

    /// File stem encoding env, policy, attack and first seed.
    pub fn file_stem(&self) -> String {
        format!("{}_{}_{}_seed{}", self.env_id, self.policy_id, self.attack.label(), self.attack.seed)
    }

    pub fn save_json(&self, path: &Path) -> Result<(), EvalError> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| EvalError::Invalid(e.to_string()))?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, EvalError> {
        serde_json::from_slice(&std::fs::read(path)?).map_err(|e| EvalError::Invalid(e.to_string()))
    }
}

/// Runs one episode per seed in lockstep with a greedy or random policy acting on
/// the (possibly attacked) observation. The simulator state is never perturbed.
pub fn evaluate(
    env: &EnvConfig,
    policy: &mut dyn Policy,
    seeds: &[u64],
    spec: &AttackSpec,
    norm: Option<&Normalizer>,
) -> Result<EvalReport, EvalError> {
    if seeds.is_empty() {
        return Err(EvalError::Invalid("evaluation needs at least one episode".into()));
    }
    spec.validate()?;
    let attacked = spec.kind != super::AttackKind::None;
    let norm = match (attacked, norm) {
        (true, None) => return Err(EvalError::MissingRanges),
        (_, n) => n,
    };
    let mut sims = seeds.iter().map(|&s| Highway::new(env.clone(), s)).collect::<Result<Vec<_>, _>>()?;
    let mut attack_rngs: Vec<ChaCha8Rng> =
        (0..seeds.len()).map(|e| seeding::rng(derive_seed(spec.seed, e as u64), streams::ATTACK)).collect();
    let mut returns = vec![0.0; seeds.len()];
    loop {
        let active: Vec<usize> = (0..sims.len()).filter(|&i| !sims[i].is_done()).collect();
        if active.is_empty() {
            break;
        }
        let clean: Vec<Observation> = active.iter().map(|&i| sims[i].observe()).collect();
        let clean_refs: Vec<&Observation> = clean.iter().collect();
        let seen = if attacked {
            let mut rngs: Vec<ChaCha8Rng> = active.iter().map(|&i| attack_rngs[i].clone()).collect();
            let out = attack_batch(&clean_refs, policy.q_net(), spec, norm.expect("checked"), &mut rngs)?;
            for (&i, r) in active.iter().zip(rngs) {
                attack_rngs[i] = r;
            }
            out
        } else {
            clean.clone()
        };
        let seen_refs: Vec<&Observation> = seen.iter().collect();
        let actions = policy.act(&active, &seen_refs)?;
        for (&i, &a) in active.iter().zip(&actions) {
            let action = crate::sim::MetaAction::from_index(a)
                .ok_or_else(|| EvalError::Invalid(format!("policy returned action {a}")))?;
            returns[i] += sims[i].step(action)?.reward;
        }
    }
    let mut report = EvalReport::new(env.id(), policy.id(), returns, *spec, seeds.to_vec());
    if let Some(n) = norm.filter(|_| attacked) {
        report.warnings = n.warnings.clone();
    }
    Ok(report)
}

/// Mean gated router weight of each policy per vehicle slot over present rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterReport {
    pub env_id: String,
    /// `mean_weights[v][i]`: mean weight of policy `i` at vehicle slot `v`.
    pub mean_weights: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl RouterReport {
    pub fn distil(&self, v: usize) -> f64 {
        self.mean_weights[v][0]
    }

    pub fn adapt(&self, v: usize) -> f64 {
        self.mean_weights[v][1..].iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("vehicle,distil,adapt,count\n");
        for v in 0..self.mean_weights.len() {
            let _ = writeln!(s, "{v},{},{},{}", self.distil(v), self.adapt(v), self.counts[v]);
        }
        s
    }
}

/// Drives greedy episodes with `net` and aggregates its routing weights.
pub fn router_report(env: &EnvConfig, net: &MopNet, seeds: &[u64]) -> Result<RouterReport, EvalError> {
    let qnet = QNet::Mop(net.clone());
    let v = net.config().vehicles;
    let n = net.config().policies;
    let mut sums = vec![vec![0.0; n]; v];
    let mut counts = vec![0usize; v];
    for &seed in seeds {
        let mut sim = Highway::new(env.clone(), seed)?;
        while !sim.is_done() {
            let obs = sim.observe();
            let w = net.router_weights(&[&obs])?;
            for (slot, row) in w.data().chunks(n).enumerate() {
                if obs.present(slot) {
                    counts[slot] += 1;
                    for (acc, x) in sums[slot].iter_mut().zip(row) {
                        *acc += x;
                    }
                }
            }
            let a = qnet.greedy_actions(&[&obs])?[0];
            sim.step(crate::sim::MetaAction::from_index(a).expect("network emits valid actions"))?;
        }
    }
    let mean_weights = sums
        .into_iter()
        .zip(&counts)
        .map(|(row, &c)| {
            if c == 0 {
                row
            } else {
                row.into_iter().map(|x| x / c as f64).collect()
            }
        })
        .collect();
    Ok(RouterReport { env_id: env.id(), mean_weights, counts })
}
