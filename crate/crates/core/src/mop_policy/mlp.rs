//! Flat MLP critic and the action-mixing ablation.

use serde::{Deserialize, Serialize};

use super::layers::Mlp;
use super::{InputEncoder, PolicyError};
use crate::diffcore::{Graph, NodeId, ParamId, ParamStore, RowEncoding, Tensor};
use crate::seeding::{self, streams};
use crate::sim::{FEATURES, NUM_ACTIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
    pub actions: usize,
    pub vehicles: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { hidden: 256, hidden_layers: 2, actions: NUM_ACTIONS, vehicles: 15 }
    }
}

impl MlpConfig {
    fn validate(&self) -> Result<(), PolicyError> {
        if self.hidden == 0 || self.actions == 0 || self.vehicles == 0 {
            return Err(PolicyError::Config("hidden, actions and vehicles must be positive".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.vehicles * FEATURES];
        w.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        w.push(self.actions);
        w
    }
}

fn flatten_encoded(
    g: &mut Graph,
    obs: NodeId,
    spec: &RowEncoding,
    batch: usize,
    vehicles: usize,
) -> Result<NodeId, PolicyError> {
    if g.shape(obs) != [batch * vehicles, FEATURES] {
        return Err(PolicyError::Shape(format!("expected [{}, {FEATURES}], got {:?}", batch * vehicles, g.shape(obs))));
    }
    let enc = g.encode_rows(obs, spec)?;
    Ok(g.reshape(enc, &[batch, vehicles * FEATURES])?)
}

/// Concatenates all vehicle rows and feeds them through a ReLU MLP.
#[derive(Debug, Clone)]
pub struct MlpNet {
    config: MlpConfig,
    encoder: InputEncoder,
    spec: RowEncoding,
    store: ParamStore,
    mlp: Mlp,
}

impl MlpNet {
    pub fn new(config: MlpConfig, encoder: InputEncoder, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = seeding::rng(seed, streams::INIT);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, &mut rng, "mlp", &config.widths());
        let spec = encoder.spec(config.vehicles);
        Ok(Self { config, encoder, spec, store, mlp })
    }

    pub fn config(&self) -> &MlpConfig {
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

    pub fn head_bias(&self) -> &Tensor {
        self.store.value(self.mlp.head().b)
    }

    pub fn forward(&self, g: &mut Graph, obs: NodeId, batch: usize) -> Result<NodeId, PolicyError> {
        let x = flatten_encoded(g, obs, &self.spec, batch, self.config.vehicles)?;
        Ok(self.mlp.forward(g, &self.store, x)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionMixConfig {
    pub members: usize,
    pub mlp: MlpConfig,
}

impl Default for ActionMixConfig {
    fn default() -> Self {
        Self { members: 2, mlp: MlpConfig::default() }
    }
}

impl std::ops::Deref for ActionMixConfig {
    type Target = MlpConfig;

    fn deref(&self) -> &MlpConfig {
        &self.mlp
    }
}

/// `Q = sum_i softmax(w)_i * MLP_i(s)` with one learnable weight per member,
/// shared by every observation.
#[derive(Debug, Clone)]
pub struct ActionMixNet {
    config: ActionMixConfig,
    encoder: InputEncoder,
    spec: RowEncoding,
    store: ParamStore,
    members: Vec<Mlp>,
    weights: ParamId,
}

impl ActionMixNet {
    pub fn new(config: ActionMixConfig, encoder: InputEncoder, seed: u64) -> Result<Self, PolicyError> {
        config.mlp.validate()?;
        if config.members == 0 {
            return Err(PolicyError::Config("action mixing needs at least one member".into()));
        }
        let mut rng = seeding::rng(seed, streams::INIT);
        let mut store = ParamStore::new();
        let widths = config.mlp.widths();
        let members = (0..config.members)
            .map(|i| Mlp::new(&mut store, &mut rng, &format!("member{}", i + 1), &widths))
            .collect();
        let weights = store.add("mix", "w", Tensor::zeros(&[config.members]));
        let spec = encoder.spec(config.mlp.vehicles);
        Ok(Self { config, encoder, spec, store, members, weights })
    }

    pub fn config(&self) -> &ActionMixConfig {
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

    pub fn set_mix_weights(&mut self, w: &[f64]) -> Result<(), PolicyError> {
        let t = self.store.value_mut(self.weights);
        if t.len() != w.len() {
            return Err(PolicyError::Shape(format!("{} mixing weights, got {}", t.len(), w.len())));
        }
        t.data_mut().copy_from_slice(w);
        Ok(())
    }

    /// Q-values of member `i` alone.
    pub fn member_forward(&self, g: &mut Graph, obs: NodeId, batch: usize, i: usize) -> Result<NodeId, PolicyError> {
        let x = flatten_encoded(g, obs, &self.spec, batch, self.config.vehicles)?;
        Ok(self.members[i].forward(g, &self.store, x)?)
    }

    pub fn forward(&self, g: &mut Graph, obs: NodeId, batch: usize) -> Result<NodeId, PolicyError> {
        let n = self.members.len();
        let x = flatten_encoded(g, obs, &self.spec, batch, self.config.vehicles)?;
        let w = g.param(&self.store, self.weights);
        let w = g.reshape(w, &[1, n])?;
        let w = g.softmax(w);
        let mut out = None;
        for (i, m) in self.members.iter().enumerate() {
            let q = m.forward(g, &self.store, x)?;
            let wi = g.gather(w, &[i])?;
            let q = g.mul_scalar(q, wi)?;
            out = Some(match out {
                None => q,
                Some(acc) => g.add(acc, q)?,
            });
        }
        Ok(out.expect("at least one member"))
    }
}
