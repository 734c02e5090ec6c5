//! Temporal-difference, conservative and robust loss terms.

use crate::attacks_eval::{ce_input_gradient, normalized, normalized_gradient, to_raw, Normalizer};
use crate::datasets::Transition;
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::mop_policy::{argmax, stack_observations, QNet};
use crate::sim::{FEATURES, PRESENCE};

use super::TrainError;

/// A minibatch of transitions stacked for the network.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn from_transitions(ts: &[&Transition], vehicles: usize) -> Result<Self, TrainError> {
        let s: Vec<_> = ts.iter().map(|t| &t.s).collect();
        let sn: Vec<_> = ts.iter().map(|t| &t.s_next).collect();
        Ok(Self {
            states: stack_observations(&s, vehicles)?,
            actions: ts.iter().map(|t| t.a).collect(),
            rewards: ts.iter().map(|t| t.r).collect(),
            next_states: stack_observations(&sn, vehicles)?,
            dones: ts.iter().map(|t| t.done).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bootstrap {
    /// `max_a' Q_target(s', a')`.
    Max,
    /// `Q_target(s', argmax_a' Q_online(s', a'))`.
    Double,
}

/// Weights and bootstrap rule of one training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub bootstrap: Bootstrap,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eps_train: f64,
    pub inner_steps: usize,
    pub inner_step_size: f64,
}

/// Bootstrap values from next-state Q tables `[batch, actions]`.
pub fn bootstrap_values(kind: Bootstrap, online_next: Option<&Tensor>, target_next: &Tensor) -> Vec<f64> {
    let a = target_next.last_dim();
    match kind {
        Bootstrap::Max => {
            target_next.data().chunks(a).map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
        }
        Bootstrap::Double => {
            let online = online_next.expect("double bootstrap needs online next-state values");
            online.data().chunks(a).zip(target_next.data().chunks(a)).map(|(o, t)| t[argmax(o)]).collect()
        }
    }
}

/// `r + gamma * (1 - done) * bootstrap`.
pub fn td_targets(rewards: &[f64], dones: &[bool], gamma: f64, bootstrap: &[f64]) -> Vec<f64> {
    rewards
        .iter()
        .zip(dones)
        .zip(bootstrap)
        .map(|((r, &d), b)| if d { *r } else { r + gamma * b })
        .collect()
}

/// Mean of `(target - Q(s, a))^2`.
pub fn td_loss(g: &mut Graph, q: NodeId, actions: &[usize], targets: &[f64]) -> Result<NodeId, TrainError> {
    let q_sa = g.gather(q, actions)?;
    let y = g.constant(Tensor::vector(targets.to_vec()));
    let diff = g.sub(q_sa, y)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Mean of `logsumexp_a Q(s, a) - Q(s, a_data)`.
pub fn cql_penalty(g: &mut Graph, q: NodeId, actions: &[usize]) -> Result<NodeId, TrainError> {
    let lse = g.logsumexp(q);
    let q_sa = g.gather(q, actions)?;
    let gap = g.sub(lse, q_sa)?;
    Ok(g.mean(gap))
}

/// Mean of `-log softmax(Q(s, .))[a]`.
pub fn cross_entropy(g: &mut Graph, q: NodeId, actions: &[usize]) -> Result<NodeId, TrainError> {
    let ls = g.log_softmax(q);
    let picked = g.gather(ls, actions)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Projected gradient ascent on the per-sample cross-entropy inside an `L2`
/// ball of radius `eps` in normalized space. Each step moves every sample by
/// `step_size` along its normalized gradient, then projects. Presence and
/// absent rows are never changed.
#[allow(clippy::too_many_arguments)]
pub fn pgd_l2(
    net: &QNet,
    norm: &Normalizer,
    x: &Tensor,
    batch: usize,
    actions: &[usize],
    eps: f64,
    steps: usize,
    step_size: f64,
) -> Result<Tensor, TrainError> {
    let per = x.len() / batch;
    let z0 = normalized(norm, x);
    let mut z = z0.clone();
    let mut cur = x.clone();
    for _ in 0..steps {
        let (grad, _) = ce_input_gradient(net, &cur, batch, actions)?;
        let gz = normalized_gradient(norm, x, &grad);
        for s in 0..batch {
            let range = s * per..(s + 1) * per;
            let gn = gz[range.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
            if gn > 0.0 {
                for i in range.clone() {
                    z[i] += step_size * gz[i] / gn;
                }
            }
            let dn = range.clone().map(|i| (z[i] - z0[i]).powi(2)).sum::<f64>().sqrt();
            if dn > eps {
                let k = eps / dn;
                for i in range {
                    z[i] = z0[i] + (z[i] - z0[i]) * k;
                }
            }
        }
        cur = to_raw(norm, x, &z0, &z);
    }
    Ok(cur)
}

/// L2 distance per sample between two raw batches in normalized space.
pub fn normalized_l2_distances(norm: &Normalizer, a: &Tensor, b: &Tensor, batch: usize) -> Vec<f64> {
    let (za, zb) = (normalized(norm, a), normalized(norm, b));
    let per = a.len() / batch;
    (0..batch)
        .map(|s| {
            (s * per..(s + 1) * per)
                .filter(|i| i % FEATURES != PRESENCE)
                .map(|i| (za[i] - zb[i]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Quantities computed without gradient before building the loss graph.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub targets: Vec<f64>,
    pub adversarial: Option<Tensor>,
}

pub fn prepare(
    net: &QNet,
    target: &QNet,
    batch: &Batch,
    spec: &LossSpec,
    norm: Option<&Normalizer>,
) -> Result<Prepared, TrainError> {
    let b = batch.len();
    let target_next = target.q_values_raw(batch.next_states.clone(), b)?;
    let online_next = match spec.bootstrap {
        Bootstrap::Double => Some(net.q_values_raw(batch.next_states.clone(), b)?),
        Bootstrap::Max => None,
    };
    let boot = bootstrap_values(spec.bootstrap, online_next.as_ref(), &target_next);
    let targets = td_targets(&batch.rewards, &batch.dones, spec.gamma, &boot);
    let adversarial = if spec.beta > 0.0 {
        let norm = norm.ok_or(TrainError::MissingRanges)?;
        let adv = pgd_l2(
            net,
            norm,
            &batch.states,
            b,
            &batch.actions,
            spec.eps_train,
            spec.inner_steps,
            spec.inner_step_size,
        )?;
        Some(adv)
    } else {
        None
    };
    Ok(Prepared { targets, adversarial })
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub td: NodeId,
    pub cql: Option<NodeId>,
    pub robust: Option<NodeId>,
}

/// `td + alpha * cql + beta * robust`; terms with zero weight are omitted.
pub fn build_loss(
    g: &mut Graph,
    net: &QNet,
    batch: &Batch,
    prepared: &Prepared,
    spec: &LossSpec,
) -> Result<LossNodes, TrainError> {
    let b = batch.len();
    let s = g.constant(batch.states.clone());
    let q = net.forward(g, s, b)?;
    let td = td_loss(g, q, &batch.actions, &prepared.targets)?;
    let mut total = td;
    let mut cql = None;
    if spec.alpha > 0.0 {
        let c = cql_penalty(g, q, &batch.actions)?;
        let w = g.scale(c, spec.alpha);
        total = g.add(total, w)?;
        cql = Some(c);
    }
    let mut robust = None;
    if let Some(adv) = prepared.adversarial.as_ref().filter(|_| spec.beta > 0.0) {
        let sa = g.constant(adv.clone());
        let qa = net.forward(g, sa, b)?;
        let r = cross_entropy(g, qa, &batch.actions)?;
        let w = g.scale(r, spec.beta);
        total = g.add(total, w)?;
        robust = Some(r);
    }
    Ok(LossNodes { total, td, cql, robust })
}
