use rand::Rng;

use crate::diffcore::{scaled_dot_product_attention, DiffError, Graph, NodeId, ParamId, ParamStore, Tensor, LAYER_NORM_EPS};

/// Affine map `x W + b` with `W ~ U(±1/sqrt(fan_in))` and zero bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        group: &str,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let w = store.add_uniform(group, &format!("{name}.w"), &[inputs, outputs], bound, rng);
        let b = store.add(group, &format!("{name}.b"), Tensor::zeros(&[outputs]));
        Self { w, b, inputs, outputs }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId, DiffError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, group: &str, name: &str, width: usize) -> Self {
        let gamma = store.add(group, &format!("{name}.gamma"), Tensor::filled(&[width], 1.0));
        let beta = store.add(group, &format!("{name}.beta"), Tensor::zeros(&[width]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId, DiffError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Post-norm transformer encoder layer: `x = LN(x + MHA(x)); x = LN(x + FFN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    qkv: Linear,
    proj: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
    width: usize,
    heads: usize,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        group: &str,
        name: &str,
        width: usize,
        heads: usize,
        ffn: usize,
    ) -> Self {
        Self {
            qkv: Linear::new(store, rng, group, &format!("{name}.qkv"), width, 3 * width),
            proj: Linear::new(store, rng, group, &format!("{name}.proj"), width, width),
            ln1: LayerNorm::new(store, group, &format!("{name}.ln1"), width),
            ff1: Linear::new(store, rng, group, &format!("{name}.ff1"), width, ffn),
            ff2: Linear::new(store, rng, group, &format!("{name}.ff2"), ffn, width),
            ln2: LayerNorm::new(store, group, &format!("{name}.ln2"), width),
            width,
            heads,
        }
    }

    /// `x` is `[batch * tokens, width]`. With `first_only` only the first token of
    /// each sequence is updated and the output is `[batch, width]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        batch: usize,
        tokens: usize,
        first_only: bool,
    ) -> Result<NodeId, DiffError> {
        let w = self.width;
        let dh = w / self.heads;
        let qkv = self.qkv.forward(g, store, x)?;
        let (mut q, mut resid, mut tq) = (g.slice_cols(qkv, 0, w)?, x, tokens);
        if first_only {
            q = g.stride_rows(q, tokens, 0)?;
            resid = g.stride_rows(x, tokens, 0)?;
            tq = 1;
        }
        let k = g.slice_cols(qkv, w, w)?;
        let v = g.slice_cols(qkv, 2 * w, w)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let split = |g: &mut Graph, t: NodeId, n: usize| -> Result<NodeId, DiffError> {
                let s = if self.heads == 1 { t } else { g.slice_cols(t, h * dh, dh)? };
                g.reshape(s, &[batch, n, dh])
            };
            let qh = split(g, q, tq)?;
            let kh = split(g, k, tokens)?;
            let vh = split(g, v, tokens)?;
            let att = scaled_dot_product_attention(g, qh, kh, vh)?;
            heads.push(g.reshape(att, &[batch * tq, dh])?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let att = self.proj.forward(g, store, cat)?;
        let h1 = g.add(resid, att)?;
        let h1 = self.ln1.forward(g, store, h1)?;
        let f = self.ff1.forward(g, store, h1)?;
        let f = g.relu(f);
        let f = self.ff2.forward(g, store, f)?;
        let h2 = g.add(h1, f)?;
        self.ln2.forward(g, store, h2)
    }
}

/// ReLU multilayer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, group: &str, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, group, &format!("fc{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: NodeId) -> Result<NodeId, DiffError> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn head(&self) -> &Linear {
        self.layers.last().expect("at least one layer")
    }
}
