//! The mixture-of-policies Q-network.

use serde::{Deserialize, Serialize};

use super::layers::{EncoderLayer, Linear};
use super::{stack_observations, InputEncoder, PolicyError};
use crate::diffcore::{Graph, NodeId, ParamId, ParamStore, RowEncoding, Tensor};
use crate::seeding::{self, streams};
use crate::sim::{FEATURES, NUM_ACTIONS};

pub const GROUP_DECODER: &str = "theta_d";
pub const GROUP_ROUTER: &str = "theta_r";
pub const GROUP_GATE: &str = "gate";

/// Parameter group of policy encoder `i` (0 is the distilled policy).
pub fn policy_group(i: usize) -> String {
    format!("theta_p{}", i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MopConfig {
    pub policies: usize,
    pub top_k: usize,
    pub proj_width: usize,
    pub token_width: usize,
    pub heads: usize,
    pub layers: usize,
    pub actions: usize,
    pub vehicles: usize,
}

impl Default for MopConfig {
    fn default() -> Self {
        Self {
            policies: 2,
            top_k: 2,
            proj_width: 32,
            token_width: 64,
            heads: 2,
            layers: 2,
            actions: NUM_ACTIONS,
            vehicles: 15,
        }
    }
}

impl MopConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Config(m));
        if self.policies == 0 || self.top_k == 0 || self.top_k > self.policies {
            return bad(format!("need 1 <= top_k <= policies, got top_k {} of {}", self.top_k, self.policies));
        }
        if self.heads == 0 || !self.token_width.is_multiple_of(self.heads) || !self.proj_width.is_multiple_of(self.heads) {
            return bad(format!(
                "widths {} and {} must be divisible by {} heads",
                self.proj_width, self.token_width, self.heads
            ));
        }
        if self.layers == 0 || self.actions == 0 || self.vehicles == 0 {
            return bad("layers, actions and vehicles must be positive".into());
        }
        Ok(())
    }
}

/// Projection `F -> F'`, transformer layers at `F'`, lift `F' -> D`.
#[derive(Debug, Clone)]
struct PolicyEncoder {
    proj: Linear,
    layers: Vec<EncoderLayer>,
    lift: Linear,
}

#[derive(Debug, Clone)]
pub struct MopNet {
    config: MopConfig,
    encoder: InputEncoder,
    spec: RowEncoding,
    store: ParamStore,
    policies: Vec<PolicyEncoder>,
    router: Linear,
    gate: Option<ParamId>,
    extra_token: ParamId,
    decoder: Vec<EncoderLayer>,
    head: Linear,
    /// Skips adapter encoders whose gate is frozen at zero.
    pub skip_inactive_adapters: bool,
}

impl MopNet {
    pub fn new(config: MopConfig, encoder: InputEncoder, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = seeding::rng(seed, streams::INIT);
        let mut store = ParamStore::new();
        let c = &config;
        let policies = (0..c.policies)
            .map(|i| {
                let group = policy_group(i);
                PolicyEncoder {
                    proj: Linear::new(&mut store, &mut rng, &group, "proj", FEATURES, c.proj_width),
                    layers: (0..c.layers)
                        .map(|l| {
                            EncoderLayer::new(
                                &mut store,
                                &mut rng,
                                &group,
                                &format!("layer{l}"),
                                c.proj_width,
                                c.heads,
                                2 * c.proj_width,
                            )
                        })
                        .collect(),
                    lift: Linear::new(&mut store, &mut rng, &group, "lift", c.proj_width, c.token_width),
                }
            })
            .collect();
        let router = Linear::new(&mut store, &mut rng, GROUP_ROUTER, "linear", FEATURES, c.policies);
        let gate = (c.policies > 1).then(|| store.add(GROUP_GATE, "g", Tensor::zeros(&[c.vehicles])));
        let bound = 1.0 / (c.token_width as f64).sqrt();
        let extra_token = store.add_uniform(GROUP_DECODER, "extra_token", &[c.token_width], bound, &mut rng);
        let decoder = (0..c.layers)
            .map(|l| {
                EncoderLayer::new(
                    &mut store,
                    &mut rng,
                    GROUP_DECODER,
                    &format!("layer{l}"),
                    c.token_width,
                    c.heads,
                    2 * c.token_width,
                )
            })
            .collect();
        let head = Linear::new(&mut store, &mut rng, GROUP_DECODER, "head", c.token_width, c.actions);
        let spec = encoder.spec(c.vehicles);
        Ok(Self {
            config,
            encoder,
            spec,
            store,
            policies,
            router,
            gate,
            extra_token,
            decoder,
            head,
            skip_inactive_adapters: true,
        })
    }

    pub fn config(&self) -> &MopConfig {
        &self.config
    }

    pub fn encoder(&self) -> &InputEncoder {
        &self.encoder
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn gate(&self) -> Option<&[f64]> {
        self.gate.map(|g| self.store.value(g).data())
    }

    pub fn set_gate(&mut self, values: &[f64]) -> Result<(), PolicyError> {
        let id = self.gate.ok_or_else(|| PolicyError::Config("single-policy network has no gate".into()))?;
        let g = self.store.value_mut(id);
        if values.len() != g.len() {
            return Err(PolicyError::Shape(format!("gate has {} entries, got {}", g.len(), values.len())));
        }
        g.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn zero_gate(&mut self) {
        if let Some(id) = self.gate {
            self.store.value_mut(id).data_mut().fill(0.0);
        }
    }

    /// Projects the gate onto `g >= 0`.
    pub fn clamp_gate(&mut self) {
        if let Some(id) = self.gate {
            for v in self.store.value_mut(id).data_mut() {
                *v = v.max(0.0);
            }
        }
    }

    fn adapters_inactive(&self) -> bool {
        match self.gate {
            Some(id) => !self.store.is_trainable(id) && self.store.value(id).data().iter().all(|&v| v == 0.0),
            None => true,
        }
    }

    /// Tokens `[batch * V, D]` of policy `which` from encoded rows.
    fn encode_policy(&self, g: &mut Graph, enc: NodeId, batch: usize, which: usize) -> Result<NodeId, PolicyError> {
        let p = &self.policies[which];
        let mut x = p.proj.forward(g, &self.store, enc)?;
        for layer in &p.layers {
            x = layer.forward(g, &self.store, x, batch, self.config.vehicles, false)?;
        }
        Ok(p.lift.forward(g, &self.store, x)?)
    }

    /// Row-stochastic routing weights `[batch * V, N]` from encoded rows.
    fn route_encoded(&self, g: &mut Graph, enc: NodeId, batch: usize) -> Result<NodeId, PolicyError> {
        let n = self.config.policies;
        let logits = self.router.forward(g, &self.store, enc)?;
        let keep = top_k_mask(g.value(logits).data(), n, self.config.top_k);
        let mut w = g.masked_softmax(logits, &keep)?;
        if let Some(gate) = self.gate {
            let gate = g.param(&self.store, gate);
            let per_row = g.repeat(gate, batch);
            for i in 1..n {
                w = g.scale_column(w, i, per_row)?;
            }
            w = g.row_normalize(w, 0)?;
        }
        Ok(w)
    }

    /// Q-values `[batch, A]` for raw rows `[batch * V, F]`.
    pub fn forward(&self, g: &mut Graph, obs: NodeId, batch: usize) -> Result<NodeId, PolicyError> {
        let v = self.config.vehicles;
        if g.shape(obs) != [batch * v, FEATURES] {
            return Err(PolicyError::Shape(format!("expected [{}, {FEATURES}], got {:?}", batch * v, g.shape(obs))));
        }
        let enc = g.encode_rows(obs, &self.spec)?;
        let w = self.route_encoded(g, enc, batch)?;
        let active = if self.skip_inactive_adapters && self.adapters_inactive() { 1 } else { self.config.policies };
        let mut mixed = None;
        for i in 0..active {
            let t = self.encode_policy(g, enc, batch, i)?;
            let t = if self.config.policies == 1 {
                t
            } else {
                let wi = g.slice_cols(w, i, 1)?;
                g.mul_col(t, wi)?
            };
            mixed = Some(match mixed {
                None => t,
                Some(m) => g.add(m, t)?,
            });
        }
        let mixed = mixed.expect("at least one policy");
        self.decode(g, mixed, batch)
    }

    /// Decoder over `[e, m_1..m_V]`, reading the first output token.
    fn decode(&self, g: &mut Graph, mixed: NodeId, batch: usize) -> Result<NodeId, PolicyError> {
        let tokens = self.config.vehicles + 1;
        let e = g.param(&self.store, self.extra_token);
        let mut x = g.prepend_row(mixed, e, self.config.vehicles)?;
        let last = self.decoder.len() - 1;
        for (l, layer) in self.decoder.iter().enumerate() {
            x = layer.forward(g, &self.store, x, batch, tokens, l == last)?;
        }
        Ok(self.head.forward(g, &self.store, x)?)
    }

    /// Routing weights `[batch * V, N]` for a batch of observations.
    pub fn router_weights(&self, obs: &[&crate::sim::Observation]) -> Result<Tensor, PolicyError> {
        let mut g = Graph::without_param_grads();
        let x = g.constant(stack_observations(obs, self.config.vehicles)?);
        let enc = g.encode_rows(x, &self.spec)?;
        let w = self.route_encoded(&mut g, enc, obs.len())?;
        Ok(g.value(w).clone())
    }

    /// Tokens `[batch * V, D]` of policy `which` for a batch of observations.
    pub fn policy_tokens(&self, obs: &[&crate::sim::Observation], which: usize) -> Result<Tensor, PolicyError> {
        if which >= self.config.policies {
            return Err(PolicyError::Config(format!("policy {which} of {}", self.config.policies)));
        }
        let mut g = Graph::without_param_grads();
        let x = g.constant(stack_observations(obs, self.config.vehicles)?);
        let enc = g.encode_rows(x, &self.spec)?;
        let t = self.encode_policy(&mut g, enc, obs.len(), which)?;
        Ok(g.value(t).clone())
    }

    /// Q-values from the decoder applied to precomputed mixed tokens `[batch * V, D]`.
    pub fn decode_tokens(&self, tokens: Tensor, batch: usize) -> Result<Tensor, PolicyError> {
        let mut g = Graph::without_param_grads();
        let m = g.constant(tokens);
        let q = self.decode(&mut g, m, batch)?;
        Ok(g.value(q).clone())
    }
}

/// Keeps the `k` largest of every row of `n` logits; ties prefer the lower index.
pub(crate) fn top_k_mask(logits: &[f64], n: usize, k: usize) -> Vec<bool> {
    let mut keep = vec![false; logits.len()];
    if k >= n {
        keep.fill(true);
        return keep;
    }
    let mut order: Vec<usize> = (0..n).collect();
    for (r, row) in logits.chunks(n).enumerate() {
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &i in &order[..k] {
            keep[r * n + i] = true;
        }
    }
    keep
}
