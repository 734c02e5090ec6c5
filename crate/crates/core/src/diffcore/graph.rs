//! Tape-recorded computation graph with reverse-mode differentiation.
//!
//! Every primitive call appends one node whose value is computed eagerly.
//! Recording order is a valid topological order, so [`Graph::backward`]
//! walks the tape once in reverse. Nodes that do not depend on any
//! gradient-requiring leaf are skipped entirely during the backward pass.

use super::{DiffError, ParamId, ParamStore, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    BatchMatMul { a: NodeId, b: NodeId, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Transpose { a: NodeId, rows: usize, cols: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRow { a: NodeId, bias: NodeId },
    MulCol { a: NodeId, w: NodeId },
    MulScalar { a: NodeId, s: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    Square { a: NodeId },
    Softmax { a: NodeId },
    LogSoftmax { a: NodeId },
    LogSumExp { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    ConcatCols { parts: Vec<(NodeId, usize)> },
    ConcatRows { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    StrideRows { a: NodeId, period: usize, offset: usize },
    PrependRow { a: NodeId, token: NodeId, period: usize },
    Reshape { a: NodeId },
    Gather { a: NodeId, idx: Vec<usize> },
    Sum { a: NodeId },
    Mean { a: NodeId },
    SumLast { a: NodeId },
    Repeat { a: NodeId, times: usize },
    ScaleColumn { a: NodeId, col: usize, factor: NodeId },
    RowNormalize { a: NodeId, sums: Vec<f64> },
    EncodeRows { a: NodeId, spec: RowEncoding },
}

/// Per-column affine encoding of grouped rows used for vehicle observations.
///
/// For a row `r` in a group of `period` rows starting at `r0`, column `c`
/// other than `mask_col` becomes
/// `x[r, mask_col] * (scale[c] * (x[r, c] - rel[c] * x[r0, c]) + shift[c])`;
/// `mask_col` itself passes through.
#[derive(Debug, Clone, PartialEq)]
pub struct RowEncoding {
    pub period: usize,
    pub mask_col: usize,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub relative: Vec<bool>,
}

impl RowEncoding {
    fn inner(&self, x: &[f64], cols: usize, r: usize, c: usize) -> f64 {
        let r0 = r - r % self.period;
        let base = if self.relative[c] { x[r0 * cols + c] } else { 0.0 };
        self.scale[c] * (x[r * cols + c] - base) + self.shift[c]
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Values are evaluated as nodes are added.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<(ParamId, NodeId)>,
    param_grads: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, msg: String) -> DiffError {
    DiffError::Shape(format!("{op}: {msg}"))
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(m == 0 || n == 0 || c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted extents keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            sum += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= sum;
        }
    }
}

fn logsumexp_row(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

impl Graph {
    /// Graph whose parameter leaves follow each parameter's trainable flag.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_nodes: Vec::new(), param_grads: true }
    }

    /// Graph whose parameter leaves never require gradients.
    pub fn without_param_grads() -> Self {
        Self { param_grads: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.param_nodes.iter().find(|(p, _)| *p == id) {
            return node;
        }
        let needs = self.param_grads && store.is_trainable(id);
        let node = self.push(store.value(id).clone(), Op::Leaf, needs);
        self.param_nodes.push((id, node));
        node
    }

    pub fn param_nodes(&self) -> &[(ParamId, NodeId)] {
        &self.param_nodes
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), n, 1, 0.0, &mut out, n, 1);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, m, k, n }, ng))
    }

    /// Batched product `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]^T` with `trans_b`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    k,
                    1,
                    &bv[i * k * n..(i + 1) * k * n],
                    rsb,
                    csb,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                    n,
                    1,
                );
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, batch, m, k, n, trans_b },
            ng,
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("{s:?} is not a matrix")));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = v[r * cols + c];
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::from_parts(vec![cols, rows], out), Op::Transpose { a, rows, cols }, ng))
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, ng))
    }

    /// Adds `bias` (length = last axis) to every row.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, DiffError> {
        let cols = self.value(a).last_dim();
        if self.value(bias).len() != cols {
            return Err(shape_err("add_row", format!("{:?} + bias {:?}", self.shape(a), self.shape(bias))));
        }
        let bv = self.value(bias).data().to_vec();
        let va = self.value(a);
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, b) in row.iter_mut().zip(&bv) {
                *x += b;
            }
        }
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(&[a, bias]);
        Ok(self.push(t, Op::AddRow { a, bias }, ng))
    }

    /// Scales row `r` of `a` by `w[r]`.
    pub fn mul_col(&mut self, a: NodeId, w: NodeId) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let (rows, cols) = (va.outer_len(), va.last_dim());
        if self.value(w).len() != rows {
            return Err(shape_err("mul_col", format!("{:?} * per-row {:?}", va.shape(), self.shape(w))));
        }
        let wv = self.value(w).data();
        let mut data = va.data().to_vec();
        for (row, &s) in data.chunks_mut(cols).zip(wv) {
            for x in row.iter_mut() {
                *x *= s;
            }
        }
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(&[a, w]);
        Ok(self.push(t, Op::MulCol { a, w }, ng))
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, DiffError> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar", format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let va = self.value(a);
        let t = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x * sv).collect());
        let ng = self.ng(&[a, s]);
        Ok(self.push(t, Op::MulScalar { a, s }, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let t = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect());
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale { a, c }, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let t = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|&x| x.max(0.0)).collect());
        let ng = self.ng(&[a]);
        self.push(t, Op::Relu { a }, ng)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let t = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|&x| x * x).collect());
        let ng = self.ng(&[a]);
        self.push(t, Op::Square { a }, ng)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let cols = va.last_dim();
        let mut out = vec![0.0; va.len()];
        softmax_rows(va.data(), cols, &mut out);
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let ng = self.ng(&[a]);
        self.push(t, Op::Softmax { a }, ng)
    }

    /// Softmax over the last axis restricted to the entries where `keep` is true.
    /// Dropped entries output exactly zero. Each row must keep at least one entry.
    pub fn masked_softmax(&mut self, a: NodeId, keep: &[bool]) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        if keep.len() != va.len() {
            return Err(shape_err("masked_softmax", format!("mask of {} for {:?}", keep.len(), va.shape())));
        }
        let cols = va.last_dim();
        let masked: Vec<f64> = va
            .data()
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x } else { f64::NEG_INFINITY })
            .collect();
        if masked.chunks(cols).any(|row| row.iter().all(|x| *x == f64::NEG_INFINITY)) {
            return Err(shape_err("masked_softmax", "a row keeps no entries".into()));
        }
        let mut out = vec![0.0; va.len()];
        softmax_rows(&masked, cols, &mut out);
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let ng = self.ng(&[a]);
        // The softmax backward rule only uses the output, whose dropped entries are zero.
        Ok(self.push(t, Op::Softmax { a }, ng))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let cols = va.last_dim();
        let mut out = Vec::with_capacity(va.len());
        for row in va.data().chunks(cols) {
            let lse = logsumexp_row(row);
            out.extend(row.iter().map(|x| x - lse));
        }
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let ng = self.ng(&[a]);
        self.push(t, Op::LogSoftmax { a }, ng)
    }

    /// Log-sum-exp over the last axis; output has one value per row.
    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let cols = va.last_dim();
        let out: Vec<f64> = va.data().chunks(cols).map(logsumexp_row).collect();
        let t = Tensor::from_parts(vec![out.len()], out);
        let ng = self.ng(&[a]);
        self.push(t, Op::LogSumExp { a }, ng)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId, DiffError> {
        let vx = self.value(x);
        let cols = vx.last_dim();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(shape_err("layer_norm", format!("{:?} with affine width {}", vx.shape(), self.value(gamma).len())));
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.outer_len();
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Concatenates 2-D nodes with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        let rows = self.value(parts[0]).outer_len();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.outer_len() != rows {
                return Err(shape_err("concat_cols", format!("row count {} vs {}", v.outer_len(), rows)));
            }
            widths.push(v.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(Tensor::from_parts(vec![rows, total], out), Op::ConcatCols { parts }, ng))
    }

    /// Stacks nodes with equal last-axis width along the row axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        let cols = self.value(parts[0]).last_dim();
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.last_dim() != cols {
                return Err(shape_err("concat_rows", format!("width {} vs {}", v.last_dim(), cols)));
            }
            out.extend_from_slice(v.data());
        }
        let rows = out.len() / cols;
        let ng = self.ng(parts);
        Ok(self.push(Tensor::from_parts(vec![rows, cols], out), Op::ConcatRows { parts: parts.to_vec() }, ng))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let cols = va.last_dim();
        if start + len > cols || len == 0 {
            return Err(shape_err("slice_cols", format!("[{start}, {}) of width {cols}", start + len)));
        }
        let rows = va.outer_len();
        let mut out = Vec::with_capacity(rows * len);
        for row in va.data().chunks(cols) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::from_parts(vec![rows, len], out), Op::SliceCols { a, start, len }, ng))
    }

    /// Selects rows `offset, offset + period, offset + 2 * period, ...`.
    pub fn stride_rows(&mut self, a: NodeId, period: usize, offset: usize) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let (rows, cols) = (va.outer_len(), va.last_dim());
        if period == 0 || offset >= period || rows % period != 0 {
            return Err(shape_err("stride_rows", format!("{rows} rows, period {period}, offset {offset}")));
        }
        let groups = rows / period;
        let mut out = Vec::with_capacity(groups * cols);
        for gi in 0..groups {
            let r = gi * period + offset;
            out.extend_from_slice(&va.data()[r * cols..(r + 1) * cols]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::from_parts(vec![groups, cols], out), Op::StrideRows { a, period, offset }, ng))
    }

    /// Inserts `token` before every block of `period` rows of `a`.
    pub fn prepend_row(&mut self, a: NodeId, token: NodeId, period: usize) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let (rows, cols) = (va.outer_len(), va.last_dim());
        if period == 0 || rows % period != 0 || self.value(token).len() != cols {
            return Err(shape_err("prepend_row", format!("{:?} with token {:?}", va.shape(), self.shape(token))));
        }
        let tv = self.value(token).data();
        let groups = rows / period;
        let mut out = Vec::with_capacity((rows + groups) * cols);
        for gi in 0..groups {
            out.extend_from_slice(tv);
            out.extend_from_slice(&va.data()[gi * period * cols..(gi + 1) * period * cols]);
        }
        let ng = self.ng(&[a, token]);
        Ok(self.push(Tensor::from_parts(vec![rows + groups, cols], out), Op::PrependRow { a, token, period }, ng))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Reshape { a }, ng))
    }

    /// Picks `a[r, idx[r]]` for each row.
    pub fn gather(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let (rows, cols) = (va.outer_len(), va.last_dim());
        if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return Err(shape_err("gather", format!("{} indices into {:?}", idx.len(), va.shape())));
        }
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| va.data()[r * cols + i]).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::from_parts(vec![rows], out), Op::Gather { a, idx: idx.to_vec() }, ng))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean { a }, ng)
    }

    /// Sum over the last axis; one value per row.
    pub fn sum_last(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let out: Vec<f64> = v.data().chunks(v.last_dim()).map(|r| r.iter().sum()).collect();
        let ng = self.ng(&[a]);
        self.push(Tensor::from_parts(vec![out.len()], out), Op::SumLast { a }, ng)
    }

    /// Concatenates `times` copies of the flattened `a`.
    pub fn repeat(&mut self, a: NodeId, times: usize) -> NodeId {
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(v.len() * times);
        for _ in 0..times {
            out.extend_from_slice(v);
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::from_parts(vec![out.len()], out), Op::Repeat { a, times }, ng)
    }

    /// Multiplies column `col` of `a` row-wise by `factor[r]`.
    pub fn scale_column(&mut self, a: NodeId, col: usize, factor: NodeId) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let (rows, cols) = (va.outer_len(), va.last_dim());
        if col >= cols || self.value(factor).len() != rows {
            return Err(shape_err("scale_column", format!("column {col} of {:?} by {:?}", va.shape(), self.shape(factor))));
        }
        let fv = self.value(factor).data();
        let mut data = va.data().to_vec();
        for r in 0..rows {
            data[r * cols + col] *= fv[r];
        }
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(&[a, factor]);
        Ok(self.push(t, Op::ScaleColumn { a, col, factor }, ng))
    }

    /// Divides each row by its sum. Rows summing to zero become one-hot at
    /// `fallback` and pass no gradient.
    pub fn row_normalize(&mut self, a: NodeId, fallback: usize) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let cols = va.last_dim();
        if fallback >= cols {
            return Err(shape_err("row_normalize", format!("fallback {fallback} of width {cols}")));
        }
        let mut sums = Vec::with_capacity(va.outer_len());
        let mut out = Vec::with_capacity(va.len());
        for row in va.data().chunks(cols) {
            let s: f64 = row.iter().sum();
            sums.push(s);
            if s == 0.0 {
                out.extend((0..cols).map(|c| if c == fallback { 1.0 } else { 0.0 }));
            } else {
                out.extend(row.iter().map(|x| x / s));
            }
        }
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::RowNormalize { a, sums }, ng))
    }

    pub fn encode_rows(&mut self, a: NodeId, spec: &RowEncoding) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let (rows, cols) = (va.outer_len(), va.last_dim());
        if spec.period == 0
            || rows % spec.period != 0
            || spec.mask_col >= cols
            || [spec.scale.len(), spec.shift.len(), spec.relative.len()] != [cols; 3]
        {
            return Err(shape_err("encode_rows", format!("{:?} with period {} and width {}", va.shape(), spec.period, spec.scale.len())));
        }
        let x = va.data();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let m = x[r * cols + spec.mask_col];
            for c in 0..cols {
                out[r * cols + c] = if c == spec.mask_col { m } else { m * spec.inner(x, cols, r, c) };
            }
        }
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::EncodeRows { a, spec: spec.clone() }, ng))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients, DiffError> {
        if self.value(seed).len() != 1 {
            return Err(DiffError::NonScalarSeed(self.shape(seed).to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(Tensor::filled(self.shape(seed), 1.0));
        for i in (0..=seed.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, param_nodes: self.param_nodes.clone() })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.requires_grad(a) {
                    let bv = self.value(b).data();
                    let ga = acc(grads, a, self.value(a));
                    gemm(m, n, k, gd, n, 1, bv, 1, n, 1.0, ga, k, 1);
                }
                if self.requires_grad(b) {
                    let av = self.value(a).data();
                    let gb = acc(grads, b, self.value(b));
                    gemm(k, m, n, av, 1, k, gd, n, 1, 1.0, gb, n, 1);
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.requires_grad(a) {
                    let ga = acc(grads, a, self.value(a));
                    for i in 0..batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        // dA = dC * B^T, where B is [k,n] or stored as [n,k].
                        let (rs, cs) = if trans_b { (k, 1) } else { (1, n) };
                        gemm(m, n, k, gi, n, 1, bi, rs, cs, 1.0, out, k, 1);
                    }
                }
                if self.requires_grad(b) {
                    let gb = acc(grads, b, self.value(b));
                    for i in 0..batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // dB[n,k] = dC^T * A
                            gemm(n, m, k, gi, 1, n, ai, k, 1, 1.0, out, k, 1);
                        } else {
                            // dB[k,n] = A^T * dC
                            gemm(k, m, n, ai, 1, k, gi, n, 1, 1.0, out, n, 1);
                        }
                    }
                }
            }
            &Op::Transpose { a, rows, cols } => {
                if self.requires_grad(a) {
                    let ga = acc(grads, a, self.value(a));
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += gd[c * rows + r];
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                add_into(grads, self, a, gd, 1.0);
                add_into(grads, self, b, gd, 1.0);
            }
            &Op::Sub { a, b } => {
                add_into(grads, self, a, gd, 1.0);
                add_into(grads, self, b, gd, -1.0);
            }
            &Op::Mul { a, b } => {
                if self.requires_grad(a) {
                    let bv = self.value(b).data();
                    let ga = acc(grads, a, self.value(a));
                    for ((o, &gi), &bi) in ga.iter_mut().zip(gd).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if self.requires_grad(b) {
                    let av = self.value(a).data();
                    let gb = acc(grads, b, self.value(b));
                    for ((o, &gi), &ai) in gb.iter_mut().zip(gd).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            &Op::AddRow { a, bias } => {
                add_into(grads, self, a, gd, 1.0);
                if self.requires_grad(bias) {
                    let cols = self.value(bias).len();
                    let gb = acc(grads, bias, self.value(bias));
                    for row in gd.chunks(cols) {
                        for (o, &gi) in gb.iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                }
            }
            &Op::MulCol { a, w } => {
                let cols = self.value(a).last_dim();
                if self.requires_grad(a) {
                    let wv = self.value(w).data();
                    let ga = acc(grads, a, self.value(a));
                    for ((orow, grow), &s) in ga.chunks_mut(cols).zip(gd.chunks(cols)).zip(wv) {
                        for (o, &gi) in orow.iter_mut().zip(grow) {
                            *o += gi * s;
                        }
                    }
                }
                if self.requires_grad(w) {
                    let av = self.value(a).data();
                    let gw = acc(grads, w, self.value(w));
                    for ((o, grow), arow) in gw.iter_mut().zip(gd.chunks(cols)).zip(av.chunks(cols)) {
                        *o += grow.iter().zip(arow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            &Op::MulScalar { a, s } => {
                if self.requires_grad(a) {
                    let sv = self.value(s).item();
                    add_into(grads, self, a, gd, sv);
                }
                if self.requires_grad(s) {
                    let av = self.value(a).data();
                    let dot: f64 = gd.iter().zip(av).map(|(x, y)| x * y).sum();
                    acc(grads, s, self.value(s))[0] += dot;
                }
            }
            &Op::Scale { a, c } => add_into(grads, self, a, gd, c),
            &Op::Relu { a } => {
                if self.requires_grad(a) {
                    let av = self.value(a).data();
                    let ga = acc(grads, a, self.value(a));
                    for ((o, &gi), &x) in ga.iter_mut().zip(gd).zip(av) {
                        if x > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            &Op::Square { a } => {
                if self.requires_grad(a) {
                    let av = self.value(a).data();
                    let ga = acc(grads, a, self.value(a));
                    for ((o, &gi), &x) in ga.iter_mut().zip(gd).zip(av) {
                        *o += 2.0 * x * gi;
                    }
                }
            }
            &Op::Softmax { a } => {
                if self.requires_grad(a) {
                    let y = node.value.data();
                    let cols = node.value.last_dim();
                    let ga = acc(grads, a, self.value(a));
                    for ((orow, grow), yrow) in ga.chunks_mut(cols).zip(gd.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((o, &gi), &yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax { a } => {
                if self.requires_grad(a) {
                    let y = node.value.data();
                    let cols = node.value.last_dim();
                    let ga = acc(grads, a, self.value(a));
                    for ((orow, grow), yrow) in ga.chunks_mut(cols).zip(gd.chunks(cols)).zip(y.chunks(cols)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((o, &gi), &yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += gi - yi.exp() * gsum;
                        }
                    }
                }
            }
            &Op::LogSumExp { a } => {
                if self.requires_grad(a) {
                    let av = self.value(a);
                    let cols = av.last_dim();
                    let lse = node.value.data();
                    let xs = av.data();
                    let ga = acc(grads, a, av);
                    for r in 0..lse.len() {
                        for c in 0..cols {
                            ga[r * cols + c] += gd[r] * (xs[r * cols + c] - lse[r]).exp();
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let cols = self.value(gamma).len();
                let gv = self.value(gamma).data();
                if self.requires_grad(gamma) {
                    let gg = acc(grads, gamma, self.value(gamma));
                    for (grow, hrow) in gd.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if self.requires_grad(beta) {
                    let gb = acc(grads, beta, self.value(beta));
                    for grow in gd.chunks(cols) {
                        for c in 0..cols {
                            gb[c] += grow[c];
                        }
                    }
                }
                if self.requires_grad(x) {
                    let gx = acc(grads, x, self.value(x));
                    let nf = cols as f64;
                    let mut gy = vec![0.0; cols];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let grow = &gd[r * cols..(r + 1) * cols];
                        let hrow = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_gy = 0.0;
                        let mut sum_gyh = 0.0;
                        for c in 0..cols {
                            gy[c] = grow[c] * gv[c];
                            sum_gy += gy[c];
                            sum_gyh += gy[c] * hrow[c];
                        }
                        let out = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            out[c] += rs / nf * (nf * gy[c] - sum_gy - hrow[c] * sum_gyh);
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let rows = gd.len() / total;
                let mut off = 0;
                for &(p, w) in parts {
                    if self.requires_grad(p) {
                        let gp = acc(grads, p, self.value(p));
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += gd[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    add_into(grads, self, p, &gd[off..off + n], 1.0);
                    off += n;
                }
            }
            &Op::SliceCols { a, start, len } => {
                if self.requires_grad(a) {
                    let cols = self.value(a).last_dim();
                    let ga = acc(grads, a, self.value(a));
                    for (orow, grow) in ga.chunks_mut(cols).zip(gd.chunks(len)) {
                        for (o, &gi) in orow[start..start + len].iter_mut().zip(grow) {
                            *o += gi;
                        }
                    }
                }
            }
            &Op::StrideRows { a, period, offset } => {
                if self.requires_grad(a) {
                    let cols = self.value(a).last_dim();
                    let ga = acc(grads, a, self.value(a));
                    for (gi, grow) in gd.chunks(cols).enumerate() {
                        let r = gi * period + offset;
                        for (o, &v) in ga[r * cols..(r + 1) * cols].iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                }
            }
            &Op::PrependRow { a, token, period } => {
                let cols = self.value(token).len();
                let block = (period + 1) * cols;
                if self.requires_grad(token) {
                    let gt = acc(grads, token, self.value(token));
                    for blk in gd.chunks(block) {
                        for (o, &v) in gt.iter_mut().zip(&blk[..cols]) {
                            *o += v;
                        }
                    }
                }
                if self.requires_grad(a) {
                    let ga = acc(grads, a, self.value(a));
                    for (gi, blk) in gd.chunks(block).enumerate() {
                        let dst = &mut ga[gi * period * cols..(gi + 1) * period * cols];
                        for (o, &v) in dst.iter_mut().zip(&blk[cols..]) {
                            *o += v;
                        }
                    }
                }
            }
            &Op::Reshape { a } => add_into(grads, self, a, gd, 1.0),
            Op::Gather { a, idx } => {
                let a = *a;
                if self.requires_grad(a) {
                    let cols = self.value(a).last_dim();
                    let ga = acc(grads, a, self.value(a));
                    for (r, &i) in idx.iter().enumerate() {
                        ga[r * cols + i] += gd[r];
                    }
                }
            }
            &Op::Sum { a } => {
                if self.requires_grad(a) {
                    let ga = acc(grads, a, self.value(a));
                    for o in ga.iter_mut() {
                        *o += gd[0];
                    }
                }
            }
            &Op::Mean { a } => {
                if self.requires_grad(a) {
                    let n = self.value(a).len() as f64;
                    let ga = acc(grads, a, self.value(a));
                    for o in ga.iter_mut() {
                        *o += gd[0] / n;
                    }
                }
            }
            &Op::SumLast { a } => {
                if self.requires_grad(a) {
                    let cols = self.value(a).last_dim();
                    let ga = acc(grads, a, self.value(a));
                    for (orow, &gi) in ga.chunks_mut(cols).zip(gd) {
                        for o in orow.iter_mut() {
                            *o += gi;
                        }
                    }
                }
            }
            &Op::Repeat { a, times } => {
                if self.requires_grad(a) {
                    let n = self.value(a).len();
                    let ga = acc(grads, a, self.value(a));
                    for t in 0..times {
                        for (o, &v) in ga.iter_mut().zip(&gd[t * n..(t + 1) * n]) {
                            *o += v;
                        }
                    }
                }
            }
            &Op::ScaleColumn { a, col, factor } => {
                let cols = self.value(a).last_dim();
                if self.requires_grad(a) {
                    let fv = self.value(factor).data();
                    let ga = acc(grads, a, self.value(a));
                    for (r, (orow, grow)) in ga.chunks_mut(cols).zip(gd.chunks(cols)).enumerate() {
                        for c in 0..cols {
                            orow[c] += if c == col { grow[c] * fv[r] } else { grow[c] };
                        }
                    }
                }
                if self.requires_grad(factor) {
                    let av = self.value(a).data();
                    let gf = acc(grads, factor, self.value(factor));
                    for (r, o) in gf.iter_mut().enumerate() {
                        *o += gd[r * cols + col] * av[r * cols + col];
                    }
                }
            }
            Op::RowNormalize { a, sums } => {
                let a = *a;
                if self.requires_grad(a) {
                    let cols = self.value(a).last_dim();
                    let y = node.value.data();
                    let ga = acc(grads, a, self.value(a));
                    for (r, &s) in sums.iter().enumerate() {
                        if s == 0.0 {
                            continue;
                        }
                        let grow = &gd[r * cols..(r + 1) * cols];
                        let yrow = &y[r * cols..(r + 1) * cols];
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += (grow[c] - dot) / s;
                        }
                    }
                }
            }
            Op::EncodeRows { a, spec } => {
                let a = *a;
                if self.requires_grad(a) {
                    let va = self.value(a);
                    let (rows, cols) = (va.outer_len(), va.last_dim());
                    let x = va.data();
                    let ga = acc(grads, a, va);
                    for r in 0..rows {
                        let r0 = r - r % spec.period;
                        let m = x[r * cols + spec.mask_col];
                        let mut gm = gd[r * cols + spec.mask_col];
                        for c in (0..cols).filter(|&c| c != spec.mask_col) {
                            let gi = gd[r * cols + c];
                            gm += gi * spec.inner(x, cols, r, c);
                            let d = gi * m * spec.scale[c];
                            ga[r * cols + c] += d;
                            if spec.relative[c] {
                                ga[r0 * cols + c] -= d;
                            }
                        }
                        ga[r * cols + spec.mask_col] += gm;
                    }
                }
            }
        }
    }
}

fn acc<'g>(grads: &'g mut [Option<Tensor>], id: NodeId, like: &Tensor) -> &'g mut [f64] {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(like.shape())).data_mut()
}

fn add_into(grads: &mut [Option<Tensor>], g: &Graph, id: NodeId, src: &[f64], c: f64) {
    if !g.requires_grad(id) {
        return;
    }
    let dst = acc(grads, id, g.value(id));
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += c * v;
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_nodes: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient w.r.t. a node, or `None` if it did not require one or was unreachable.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. a bound parameter.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_nodes.iter().find(|(p, _)| *p == id).and_then(|&(_, n)| self.wrt(n))
    }

    /// Parameter gradients ordered by [`ParamId`]; `None` for untouched or frozen ones.
    pub fn into_param_grads(mut self, num_params: usize) -> Vec<Option<Tensor>> {
        let mut out = vec![None; num_params];
        for &(p, n) in &self.param_nodes {
            out[p.0] = self.grads[n.0].take();
        }
        out
    }
}
