//! Dense `f64` tensors, a tape-based reverse-mode graph, optimizers,
//! finite-difference gradient checking and the checkpoint format.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointHeader, ParamEntry, CHECKPOINT_FORMAT};
pub use gradcheck::{
    check_graph_fn, check_store, finite_diff_check, relative_error, GradCheckOptions, GradCheckReport,
    WorstCoordinate,
};
pub use graph::{Gradients, Graph, NodeId, RowEncoding};
pub use optim::{Adam, AdamConfig, Sgd};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Layer normalization epsilon used by every network.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward seed must be scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// `sign` with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scaled dot-product attention `softmax(q k^T / sqrt(d)) v` for
/// `q: [B, Tq, d]`, `k, v: [B, Tk, d]`.
pub fn scaled_dot_product_attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId, DiffError> {
    let d = g.value(q).last_dim();
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let att = g.softmax(scores);
    g.bmm(att, v, false)
}
