//! Q-networks: the mixture-of-policies network, the flat MLP baseline and the
//! action-mixing baseline, sharing one input encoding and checkpoint format.

mod layers;
mod mlp;
mod mop;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::diffcore::{Checkpoint, DiffError, Graph, NodeId, ParamStore, RowEncoding, Tensor};
use crate::sim::{Observation, FEATURES, PRESENCE};

pub use layers::{EncoderLayer, LayerNorm, Linear, Mlp};
pub use mlp::{ActionMixConfig, ActionMixNet, MlpConfig, MlpNet};
pub use mop::{policy_group, MopConfig, MopNet, GROUP_DECODER, GROUP_GATE, GROUP_ROUTER};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("observation shape mismatch: {0}")]
    Shape(String),
    #[error("unknown phase {0:?}, expected offline_distill or online_adapt")]
    UnknownPhase(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Distance in metres that maps to one unit of encoded longitudinal offset.
pub const X_OFFSET_SCALE: f64 = 100.0;

/// Fixed, parameter-free map from raw observation rows to network inputs.
///
/// `x` becomes the offset from the ego vehicle divided by [`X_OFFSET_SCALE`];
/// `y`, `vx` and `vy` are min-max scaled with the given ranges. Every feature is
/// multiplied by the presence flag, so absent rows stay exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputEncoder {
    pub feature_min: [f64; FEATURES],
    pub feature_max: [f64; FEATURES],
}

impl Default for InputEncoder {
    fn default() -> Self {
        Self { feature_min: [0.0, 0.0, 0.0, 0.0, -4.0], feature_max: [1.0, 1000.0, 12.0, 32.0, 4.0] }
    }
}

impl InputEncoder {
    pub fn new(feature_min: [f64; FEATURES], feature_max: [f64; FEATURES]) -> Self {
        Self { feature_min, feature_max }
    }

    /// Uses the dataset manifest ranges, or the defaults when it has none.
    pub fn from_dataset(dataset: &Dataset) -> Self {
        dataset.ranges().map(|(lo, hi)| Self::new(lo, hi)).unwrap_or_default()
    }

    pub fn spec(&self, vehicles: usize) -> RowEncoding {
        let mut scale = vec![1.0; FEATURES];
        let mut shift = vec![0.0; FEATURES];
        let mut relative = vec![false; FEATURES];
        for c in 0..FEATURES {
            if c == PRESENCE {
                continue;
            }
            if c == 1 {
                scale[c] = 1.0 / X_OFFSET_SCALE;
                relative[c] = true;
                continue;
            }
            let range = self.feature_max[c] - self.feature_min[c];
            if range > 0.0 {
                scale[c] = 1.0 / range;
                shift[c] = -self.feature_min[c] / range;
            }
        }
        RowEncoding { period: vehicles, mask_col: PRESENCE, scale, shift, relative }
    }
}

/// Stacks observations into a `[batch * vehicles, FEATURES]` tensor.
pub fn stack_observations(obs: &[&Observation], vehicles: usize) -> Result<Tensor, PolicyError> {
    if obs.is_empty() {
        return Err(PolicyError::Shape("empty batch".into()));
    }
    let mut data = Vec::with_capacity(obs.len() * vehicles * FEATURES);
    for o in obs {
        if o.vehicles() != vehicles {
            return Err(PolicyError::Shape(format!("expected {vehicles} vehicle rows, got {}", o.vehicles())));
        }
        data.extend_from_slice(o.data());
    }
    Ok(Tensor::new(vec![obs.len() * vehicles, FEATURES], data)?)
}

/// Training phase of the two-stage schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    OfflineDistill,
    OnlineAdapt,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::OfflineDistill => "offline_distill",
            Phase::OnlineAdapt => "online_adapt",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "offline_distill" => Ok(Phase::OfflineDistill),
            "online_adapt" => Ok(Phase::OnlineAdapt),
            other => Err(PolicyError::UnknownPhase(other.to_string())),
        }
    }
}

/// Trainability of each parameter group after [`apply_freeze`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub theta_d: bool,
    pub theta_r: bool,
    pub theta_p1: bool,
    pub theta_p2: bool,
    pub gate: bool,
}

/// Sets group trainability for `phase`. The offline phase also zeroes the gate.
pub fn apply_freeze(net: &mut MopNet, phase: Phase) -> FreezeMask {
    let mask = match phase {
        Phase::OfflineDistill => FreezeMask { theta_d: true, theta_r: true, theta_p1: true, theta_p2: false, gate: false },
        Phase::OnlineAdapt => FreezeMask { theta_d: true, theta_r: true, theta_p1: false, theta_p2: true, gate: true },
    };
    if phase == Phase::OfflineDistill {
        net.zero_gate();
    }
    let policies = net.config().policies;
    let store = net.params_mut();
    store.set_group_trainable(GROUP_DECODER, mask.theta_d);
    store.set_group_trainable(GROUP_ROUTER, mask.theta_r);
    store.set_group_trainable(&policy_group(0), mask.theta_p1);
    for i in 1..policies {
        store.set_group_trainable(&policy_group(i), mask.theta_p2);
    }
    store.set_group_trainable(GROUP_GATE, mask.gate);
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    ActionMix,
    Mop,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::ActionMix => "action_mix",
            Arch::Mop => "mop",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Arch::Mlp, Arch::ActionMix, Arch::Mop]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| PolicyError::Config(format!("unknown architecture {s:?}")))
    }
}

/// Architecture choice plus the config of each architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub arch: Arch,
    pub mop: MopConfig,
    pub mlp: MlpConfig,
    pub action_mix: ActionMixConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Mop,
            mop: MopConfig::default(),
            mlp: MlpConfig::default(),
            action_mix: ActionMixConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn with_arch(arch: Arch) -> Self {
        Self { arch, ..Self::default() }
    }

    /// Sets the observed vehicle count of every architecture.
    pub fn with_vehicles(mut self, vehicles: usize) -> Self {
        self.mop.vehicles = vehicles;
        self.mlp.vehicles = vehicles;
        self.action_mix.mlp.vehicles = vehicles;
        self
    }

    pub fn build(&self, encoder: InputEncoder, seed: u64) -> Result<QNet, PolicyError> {
        Ok(match self.arch {
            Arch::Mlp => QNet::Mlp(MlpNet::new(self.mlp.clone(), encoder, seed)?),
            Arch::ActionMix => QNet::ActionMix(ActionMixNet::new(self.action_mix.clone(), encoder, seed)?),
            Arch::Mop => QNet::Mop(MopNet::new(self.mop.clone(), encoder, seed)?),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
enum CheckpointMeta {
    Mlp { config: MlpConfig, encoder: InputEncoder },
    ActionMix { config: ActionMixConfig, encoder: InputEncoder },
    Mop { config: MopConfig, encoder: InputEncoder },
}

/// Any of the Q-network architectures.
#[derive(Debug, Clone)]
pub enum QNet {
    Mlp(MlpNet),
    ActionMix(ActionMixNet),
    Mop(MopNet),
}

impl QNet {
    pub fn arch(&self) -> Arch {
        match self {
            QNet::Mlp(_) => Arch::Mlp,
            QNet::ActionMix(_) => Arch::ActionMix,
            QNet::Mop(_) => Arch::Mop,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            QNet::Mlp(n) => n.params(),
            QNet::ActionMix(n) => n.params(),
            QNet::Mop(n) => n.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            QNet::Mlp(n) => n.params_mut(),
            QNet::ActionMix(n) => n.params_mut(),
            QNet::Mop(n) => n.params_mut(),
        }
    }

    pub fn encoder(&self) -> &InputEncoder {
        match self {
            QNet::Mlp(n) => n.encoder(),
            QNet::ActionMix(n) => n.encoder(),
            QNet::Mop(n) => n.encoder(),
        }
    }

    pub fn vehicles(&self) -> usize {
        match self {
            QNet::Mlp(n) => n.config().vehicles,
            QNet::ActionMix(n) => n.config().vehicles,
            QNet::Mop(n) => n.config().vehicles,
        }
    }

    pub fn actions(&self) -> usize {
        match self {
            QNet::Mlp(n) => n.config().actions,
            QNet::ActionMix(n) => n.config().actions,
            QNet::Mop(n) => n.config().actions,
        }
    }

    pub fn as_mop(&self) -> Option<&MopNet> {
        match self {
            QNet::Mop(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_mop_mut(&mut self) -> Option<&mut MopNet> {
        match self {
            QNet::Mop(n) => Some(n),
            _ => None,
        }
    }

    /// Q-values `[batch, actions]` for raw observation rows `obs` of shape `[batch * vehicles, FEATURES]`.
    pub fn forward(&self, g: &mut Graph, obs: NodeId, batch: usize) -> Result<NodeId, PolicyError> {
        match self {
            QNet::Mlp(n) => n.forward(g, obs, batch),
            QNet::ActionMix(n) => n.forward(g, obs, batch),
            QNet::Mop(n) => n.forward(g, obs, batch),
        }
    }

    /// Inference-only Q-values `[batch, actions]`.
    pub fn q_values(&self, obs: &[&Observation]) -> Result<Tensor, PolicyError> {
        let x = stack_observations(obs, self.vehicles())?;
        self.q_values_raw(x, obs.len())
    }

    pub fn q_values_raw(&self, x: Tensor, batch: usize) -> Result<Tensor, PolicyError> {
        let mut g = Graph::without_param_grads();
        let x = g.constant(x);
        let q = self.forward(&mut g, x, batch)?;
        Ok(g.value(q).clone())
    }

    /// Greedy action per observation; ties go to the lowest index.
    pub fn greedy_actions(&self, obs: &[&Observation]) -> Result<Vec<usize>, PolicyError> {
        let q = self.q_values(obs)?;
        Ok(q.data().chunks(self.actions()).map(argmax).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = match self {
            QNet::Mlp(n) => CheckpointMeta::Mlp { config: n.config().clone(), encoder: n.encoder().clone() },
            QNet::ActionMix(n) => {
                CheckpointMeta::ActionMix { config: n.config().clone(), encoder: n.encoder().clone() }
            }
            QNet::Mop(n) => CheckpointMeta::Mop { config: n.config().clone(), encoder: n.encoder().clone() },
        };
        Checkpoint::from_store(self.params(), serde_json::to_value(meta).expect("meta serializes"))
    }

    /// Rebuilds the network described by the checkpoint metadata and loads its values.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, PolicyError> {
        let meta: CheckpointMeta = serde_json::from_value(ck.header.meta.clone())
            .map_err(|e| PolicyError::Checkpoint(format!("bad network metadata: {e}")))?;
        let mut net = match meta {
            CheckpointMeta::Mlp { config, encoder } => QNet::Mlp(MlpNet::new(config, encoder, 0)?),
            CheckpointMeta::ActionMix { config, encoder } => QNet::ActionMix(ActionMixNet::new(config, encoder, 0)?),
            CheckpointMeta::Mop { config, encoder } => QNet::Mop(MopNet::new(config, encoder, 0)?),
        };
        ck.restore_into(net.params_mut())?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
