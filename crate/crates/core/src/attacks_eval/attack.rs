use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{sign, Graph, Tensor};
use crate::mop_policy::{stack_observations, QNet};
use crate::sim::{Observation, FEATURES, PRESENCE};

use super::{EvalError, Normalizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Uniform,
    Gaussian,
    Fgsm,
    Pgd,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] =
        [AttackKind::None, AttackKind::Uniform, AttackKind::Gaussian, AttackKind::Fgsm, AttackKind::Pgd];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Uniform => "uniform",
            AttackKind::Gaussian => "gaussian",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
        }
    }

    pub fn needs_gradient(self) -> bool {
        matches!(self, AttackKind::Fgsm | AttackKind::Pgd)
    }

    /// Radius used when none is given: 0.2 for noise, 0.1 for gradient attacks.
    pub fn default_eps(self) -> f64 {
        match self {
            AttackKind::None => 0.0,
            AttackKind::Uniform | AttackKind::Gaussian => 0.2,
            AttackKind::Fgsm | AttackKind::Pgd => 0.1,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EvalError::Invalid(format!("unknown attack {s:?}")))
    }
}

/// Observation perturbation with radius `eps` in normalized space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub eps: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    10
}

fn default_step_size() -> f64 {
    0.01
}

impl AttackSpec {
    pub fn new(kind: AttackKind) -> Self {
        Self { kind, eps: kind.default_eps(), steps: default_steps(), step_size: default_step_size(), seed: 0 }
    }

    pub fn none() -> Self {
        Self::new(AttackKind::None)
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(EvalError::Invalid(format!("attack radius must be finite and >= 0, got {}", self.eps)));
        }
        if self.kind == AttackKind::Pgd && (self.steps == 0 || !(self.step_size > 0.0)) {
            return Err(EvalError::Invalid("pgd needs steps >= 1 and step_size > 0".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::None => "none".into(),
            AttackKind::Pgd => format!("pgd-eps{}-{}x{}", self.eps, self.steps, self.step_size),
            k => format!("{k}-eps{}", self.eps),
        }
    }
}

/// Gradient of `sum_i -log softmax(Q(x_i))[a_i]` wrt the raw input rows, and
/// the per-sample losses.
pub fn ce_input_gradient(
    net: &QNet,
    x: &Tensor,
    batch: usize,
    actions: &[usize],
) -> Result<(Tensor, Vec<f64>), EvalError> {
    let mut g = Graph::without_param_grads();
    let xi = g.input(x.clone());
    let q = net.forward(&mut g, xi, batch)?;
    let ls = g.log_softmax(q);
    let picked = g.gather(ls, actions)?;
    let losses = g.value(picked).data().iter().map(|v| -v).collect();
    let total = g.sum(picked);
    let loss = g.scale(total, -1.0);
    let grads = g.backward(loss)?;
    let grad = grads.wrt(xi).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((grad, losses))
}

fn present(x: &[f64], r: usize) -> bool {
    x[r * FEATURES + PRESENCE] != 0.0
}

/// Maps normalized `z` back to raw units; absent rows keep their original values.
/// Maps a normalized point back to raw units as `x + (z - z0) * span`, so
/// unperturbed coordinates come back bit-identical.
pub(crate) fn to_raw(norm: &Normalizer, x: &Tensor, z0: &[f64], z: &[f64]) -> Tensor {
    let mut out = x.clone();
    let rows = x.len() / FEATURES;
    for r in 0..rows {
        if !present(x.data(), r) {
            continue;
        }
        for c in 1..FEATURES {
            let i = r * FEATURES + c;
            if z[i] != z0[i] {
                out.data_mut()[i] = x.data()[i] + (z[i] - z0[i]) * norm.span(c);
            }
        }
    }
    out
}

pub(crate) fn normalized(norm: &Normalizer, x: &Tensor) -> Vec<f64> {
    let mut z = x.data().to_vec();
    norm.normalize_rows(&mut z);
    z
}

/// Gradient wrt the normalized features, zero on presence and absent rows.
pub(crate) fn normalized_gradient(norm: &Normalizer, x: &Tensor, grad_raw: &Tensor) -> Vec<f64> {
    let mut gz = grad_raw.data().to_vec();
    for (r, row) in gz.chunks_mut(FEATURES).enumerate() {
        let keep = present(x.data(), r);
        for (c, v) in row.iter_mut().enumerate() {
            *v = if keep && c != PRESENCE { *v * norm.span(c) } else { 0.0 };
        }
    }
    gz
}

/// Iterates over the perturbable coordinates: continuous features of present rows.
fn perturbable(x: &Tensor) -> impl Iterator<Item = usize> + '_ {
    let rows = x.len() / FEATURES;
    (0..rows).filter(|&r| present(x.data(), r)).flat_map(|r| (1..FEATURES).map(move |c| r * FEATURES + c))
}

/// `z + eps * sign(grad)` clipped to `[0, 1]`.
pub fn fgsm(
    net: &QNet,
    norm: &Normalizer,
    x: &Tensor,
    batch: usize,
    actions: &[usize],
    eps: f64,
) -> Result<Tensor, EvalError> {
    let (grad, _) = ce_input_gradient(net, x, batch, actions)?;
    let gz = normalized_gradient(norm, x, &grad);
    let z0 = normalized(norm, x);
    let mut z = z0.clone();
    for i in perturbable(x) {
        z[i] = (z[i] + eps * sign(gz[i])).clamp(0.0, 1.0);
    }
    Ok(to_raw(norm, x, &z0, &z))
}

/// Signed-gradient ascent with `L∞` projection onto the `eps`-ball around the
/// clean point and clipping to `[0, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn pgd_linf(
    net: &QNet,
    norm: &Normalizer,
    x: &Tensor,
    batch: usize,
    actions: &[usize],
    eps: f64,
    steps: usize,
    step_size: f64,
) -> Result<Tensor, EvalError> {
    let z0 = normalized(norm, x);
    let idx: Vec<usize> = perturbable(x).collect();
    let mut z = z0.clone();
    let mut cur = x.clone();
    for _ in 0..steps {
        let (grad, _) = ce_input_gradient(net, &cur, batch, actions)?;
        let gz = normalized_gradient(norm, x, &grad);
        for &i in &idx {
            let stepped = z[i] + step_size * sign(gz[i]);
            z[i] = stepped.clamp(z0[i] - eps, z0[i] + eps).clamp(0.0, 1.0);
        }
        cur = to_raw(norm, x, &z0, &z);
    }
    Ok(cur)
}

/// iid noise on every perturbable coordinate, one generator per sample.
pub fn noise(kind: AttackKind, norm: &Normalizer, x: &Tensor, eps: f64, rngs: &mut [ChaCha8Rng]) -> Tensor {
    let per_sample = x.len() / rngs.len().max(1);
    let z0 = normalized(norm, x);
    let mut z = z0.clone();
    let gauss = Normal::new(0.0, eps.max(f64::MIN_POSITIVE)).expect("valid std");
    for (s, (rng, zs)) in rngs.iter_mut().zip(z.chunks_mut(per_sample.max(1))).enumerate() {
        for (j, zi) in zs.iter_mut().enumerate() {
            let i = s * per_sample + j;
            if i % FEATURES == PRESENCE {
                continue;
            }
            let d = match kind {
                AttackKind::Uniform => rng.random_range(-eps..=eps),
                _ => gauss.sample(rng).clamp(-eps, eps),
            };
            if present(x.data(), i / FEATURES) {
                *zi += d;
            }
        }
    }
    to_raw(norm, x, &z0, &z)
}

/// Perturbs each observation; gradient attacks target the clean greedy action.
pub fn attack_batch(
    obs: &[&Observation],
    net: Option<&QNet>,
    spec: &AttackSpec,
    norm: &Normalizer,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Observation>, EvalError> {
    spec.validate()?;
    if spec.kind == AttackKind::None || spec.eps == 0.0 {
        return Ok(obs.iter().map(|o| (*o).clone()).collect());
    }
    let vehicles = obs[0].vehicles();
    let x = stack_observations(obs, vehicles)?;
    let out = match spec.kind {
        AttackKind::Uniform | AttackKind::Gaussian => {
            if rngs.len() != obs.len() {
                return Err(EvalError::Invalid(format!("{} generators for {} observations", rngs.len(), obs.len())));
            }
            noise(spec.kind, norm, &x, spec.eps, rngs)
        }
        kind => {
            let net = net.ok_or(EvalError::GradientUnavailable(kind))?;
            let actions = net.greedy_actions(obs)?;
            if kind == AttackKind::Fgsm {
                fgsm(net, norm, &x, obs.len(), &actions, spec.eps)?
            } else {
                pgd_linf(net, norm, &x, obs.len(), &actions, spec.eps, spec.steps, spec.step_size)?
            }
        }
    };
    Ok(out
        .data()
        .chunks(vehicles * FEATURES)
        .map(|c| Observation::from_flat(vehicles, c.to_vec()).expect("row-aligned chunk"))
        .collect())
}

pub fn attack(
    obs: &Observation,
    net: Option<&QNet>,
    spec: &AttackSpec,
    norm: &Normalizer,
    rng: &mut ChaCha8Rng,
) -> Result<Observation, EvalError> {
    let mut out = attack_batch(&[obs], net, spec, norm, std::slice::from_mut(rng))?;
    Ok(out.remove(0))
}
