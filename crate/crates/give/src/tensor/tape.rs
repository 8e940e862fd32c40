//! Reverse-mode autodiff over a topologically ordered op tape.
//!
//! Each forward op validates shapes, computes its value eagerly through the
//! shared kernels, and records what backward needs (inputs by id plus saved
//! activations). `backward` walks the tape in reverse exactly once per node.
//! All accumulation orders are fixed, so repeated backward passes over the
//! same tape produce bitwise-identical gradients.

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    MatMulBt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// Row `i` of the output is `a[i] + tile[i % tile_rows]`.
    AddTiledRows { a: NodeId, tile: NodeId },
    Scale { a: NodeId, c: f64 },
    Gelu { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNorm {
        a: NodeId,
        affine: Option<(NodeId, NodeId)>,
        /// Per-row (mean, 1/std) from the forward pass.
        stats: Vec<(f64, f64)>,
    },
    L2NormalizeRows { a: NodeId, norms: Vec<f64> },
    /// Multi-head self-attention over `samples` independent groups of
    /// `seq` tokens. Saves post-softmax probabilities for backward.
    SelfAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        samples: usize,
        seq: usize,
        probs: Vec<f64>,
    },
    /// Attention of grouped query rows against one key/value token per
    /// group. The softmax over a single key is identically 1, so the output
    /// is the value row broadcast to every query row and the query/key
    /// inputs receive zero gradient; backward only needs the value id.
    CrossAttendSingleKv { v: NodeId, group: usize },
    GatherRows { a: NodeId, indices: Vec<usize> },
    ScatterAddRows { base: NodeId, delta: NodeId, indices: Vec<usize> },
    /// Per group of `group` rows, append one copy of `row`.
    AppendRowPerGroup { a: NodeId, row: NodeId, group: usize },
    /// Per-row log-sum-exp over the entries selected by `mask`.
    MaskedLseRows { s: NodeId, mask: Vec<bool> },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    BceWithLogitsMean { z: NodeId, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            // NaN/Inf scanning is a debug-build safety net; release runs skip it.
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        assert_eq!(self.nodes[id].value.numel(), 1, "node is not a scalar");
        self.nodes[id].value.data()[0]
    }

    /// Gradient buffer, if any gradient reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    /// Gradient buffer, zeros when no gradient reached the node.
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<f64> {
        match &self.nodes[id].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[id].value.numel()],
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.push_unchecked(value, needs_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn push_unchecked(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op, name: &'static str) -> Result<NodeId> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push_unchecked(value, needs_grad, op))
    }

    // ── forward ops ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2();
        let (kb, n) = self.value(b).dims2();
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(m, n);
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), out.data_mut(), m, ka, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, ng, Op::MatMul { a, b }, "matmul")
    }

    /// `a[m×k] · b[n×k]ᵀ`, the similarity-matrix form.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2();
        let (n, kb) = self.value(b).dims2();
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_bt",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(m, n);
        kernels::matmul_bt_acc(self.value(a).data(), self.value(b).data(), out.data_mut(), m, ka, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, ng, Op::MatMulBt { a, b }, "matmul_bt")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    fn elementwise_pair(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, ng, op, name)
    }

    /// Broadcast-add `tile` over row groups: row `i` gains `tile[i % tile_rows]`.
    pub fn add_tiled_rows(&mut self, a: NodeId, tile: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2();
        let (tr, tc) = self.value(tile).dims2();
        if tc != c || tr == 0 || r % tr != 0 {
            return Err(Error::ShapeMismatch {
                op: "add_tiled_rows",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(tile).shape().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        {
            let tile_v = self.value(tile).data();
            let o = out.data_mut();
            for i in 0..r {
                let trow = &tile_v[(i % tr) * c..(i % tr + 1) * c];
                let orow = &mut o[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] += trow[j];
                }
            }
        }
        let ng = self.needs(a) || self.needs(tile);
        self.push(out, ng, Op::AddTiledRows { a, tile }, "add_tiled_rows")
    }

    /// Row-vector bias added to every row.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        if self.value(bias).rows() != 1 {
            return Err(Error::Contract("bias must be a single row".into()));
        }
        self.add_tiled_rows(a, bias)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(out, ng, Op::Scale { a, c }, "scale")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|&x| kernels::gelu(x)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(out, ng, Op::Gelu { a }, "gelu")
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2();
        let mut out = Tensor::zeros(r, c);
        kernels::softmax_rows(self.value(a).data(), out.data_mut(), r, c);
        let ng = self.needs(a);
        self.push(out, ng, Op::SoftmaxRows { a }, "softmax_rows")
    }

    /// Per-row standardization, optionally with a trainable scale/shift pair.
    pub fn layer_norm(
        &mut self,
        a: NodeId,
        eps: f64,
        affine: Option<(NodeId, NodeId)>,
    ) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2();
        if c < 2 {
            return Err(Error::Contract("layer_norm needs at least two columns".into()));
        }
        if let Some((g, b)) = affine {
            if self.value(g).numel() != c || self.value(b).numel() != c {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm affine",
                    lhs: self.value(g).shape().to_vec(),
                    rhs: vec![1, c],
                });
            }
        }
        let stats = kernels::row_stats(self.value(a).data(), r, c, eps);
        let mut out = Tensor::zeros(r, c);
        {
            let x = self.value(a).data();
            let o = out.data_mut();
            for i in 0..r {
                let (mean, rstd) = stats[i];
                for j in 0..c {
                    o[i * c + j] = (x[i * c + j] - mean) * rstd;
                }
            }
            if let Some((g, b)) = affine {
                let gv = self.value(g).data();
                let bv = self.value(b).data();
                for i in 0..r {
                    for j in 0..c {
                        o[i * c + j] = o[i * c + j] * gv[j] + bv[j];
                    }
                }
            }
        }
        let mut ng = self.needs(a);
        if let Some((g, b)) = affine {
            ng = ng || self.needs(g) || self.needs(b);
        }
        self.push(out, ng, Op::LayerNorm { a, affine, stats }, "layer_norm")
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2();
        let mut norms = Vec::with_capacity(r);
        let mut out = Tensor::zeros(r, c);
        {
            let x = self.value(a).data();
            let o = out.data_mut();
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let norm = kernels::dot(row, row).sqrt().max(1e-30);
                norms.push(norm);
                for j in 0..c {
                    o[i * c + j] = row[j] / norm;
                }
            }
        }
        let ng = self.needs(a);
        self.push(out, ng, Op::L2NormalizeRows { a, norms }, "l2_normalize_rows")
    }

    /// Multi-head self-attention over `samples` groups of `seq` rows.
    /// `q`, `k`, `v` are all `[samples·seq × d]` with heads laid out as
    /// contiguous column blocks; logits are scaled by 1/sqrt(d/heads).
    pub fn self_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        samples: usize,
        seq: usize,
    ) -> Result<NodeId> {
        let (rows, d) = self.value(q).dims2();
        for &other in &[k, v] {
            if self.value(other).dims2() != (rows, d) {
                return Err(Error::ShapeMismatch {
                    op: "self_attention",
                    lhs: self.value(q).shape().to_vec(),
                    rhs: self.value(other).shape().to_vec(),
                });
            }
        }
        if rows != samples * seq || heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!(
                "self_attention layout mismatch: rows={rows} samples={samples} seq={seq} heads={heads} d={d}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut probs = vec![0.0; samples * heads * seq * seq];
        let mut out = Tensor::zeros(rows, d);
        {
            let o = out.data_mut();
            let mut scores = vec![0.0; seq];
            for s in 0..samples {
                let base = s * seq;
                for h in 0..heads {
                    let off = h * dh;
                    let pbase = (s * heads + h) * seq * seq;
                    for i in 0..seq {
                        let qrow = &qv[(base + i) * d + off..(base + i) * d + off + dh];
                        for (j, sc) in scores.iter_mut().enumerate() {
                            let krow = &kv[(base + j) * d + off..(base + j) * d + off + dh];
                            *sc = kernels::dot(qrow, krow) * scale;
                        }
                        let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                        kernels::softmax_rows(&scores, prow, 1, seq);
                        let orow = &mut o[(base + i) * d + off..(base + i) * d + off + dh];
                        for (j, &p) in prow.iter().enumerate() {
                            let vrow = &vv[(base + j) * d + off..(base + j) * d + off + dh];
                            for t in 0..dh {
                                orow[t] += p * vrow[t];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            ng,
            Op::SelfAttention { q, k, v, heads, samples, seq, probs },
            "self_attention",
        )
    }

    /// Cross-attention of `group` query rows per sample against a single
    /// key/value row per sample. Output has `q`'s row count and `v`'s width.
    pub fn cross_attend_single_kv(&mut self, q: NodeId, k: NodeId, v: NodeId, group: usize) -> Result<NodeId> {
        let (qr, _) = self.value(q).dims2();
        let (kr, kd) = self.value(k).dims2();
        let (vr, vd) = self.value(v).dims2();
        if kr != vr || kd != vd || group == 0 || qr != kr * group {
            return Err(Error::Contract(format!(
                "cross_attend_single_kv layout mismatch: q rows={qr} kv rows={kr}/{vr} group={group}"
            )));
        }
        let mut out = Tensor::zeros(qr, vd);
        {
            let vv = self.value(v).data();
            let o = out.data_mut();
            for i in 0..qr {
                let s = i / group;
                o[i * vd..(i + 1) * vd].copy_from_slice(&vv[s * vd..(s + 1) * vd]);
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, ng, Op::CrossAttendSingleKv { v, group }, "cross_attend_single_kv")
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2();
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("gather_rows index {bad} out of {r} rows")));
        }
        let mut out = Tensor::zeros(indices.len(), c);
        {
            let x = self.value(a).data();
            let o = out.data_mut();
            for (t, &i) in indices.iter().enumerate() {
                o[t * c..(t + 1) * c].copy_from_slice(&x[i * c..(i + 1) * c]);
            }
        }
        let ng = self.needs(a);
        self.push(out, ng, Op::GatherRows { a, indices }, "gather_rows")
    }

    /// `out = base; out[indices[t]] += delta[t]`.
    pub fn scatter_add_rows(&mut self, base: NodeId, delta: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let (br, bc) = self.value(base).dims2();
        let (dr, dc) = self.value(delta).dims2();
        if dc != bc || dr != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: self.value(base).shape().to_vec(),
                rhs: self.value(delta).shape().to_vec(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= br) {
            return Err(Error::Contract(format!("scatter_add_rows index {bad} out of {br} rows")));
        }
        let mut out = self.value(base).clone();
        {
            let dv = self.value(delta).data();
            let o = out.data_mut();
            for (t, &i) in indices.iter().enumerate() {
                let orow = &mut o[i * bc..(i + 1) * bc];
                let drow = &dv[t * bc..(t + 1) * bc];
                for j in 0..bc {
                    orow[j] += drow[j];
                }
            }
        }
        let ng = self.needs(base) || self.needs(delta);
        self.push(out, ng, Op::ScatterAddRows { base, delta, indices }, "scatter_add_rows")
    }

    /// Append a shared row after every `group` rows of `a`.
    pub fn append_row_per_group(&mut self, a: NodeId, row: NodeId, group: usize) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2();
        let (rr, rc) = self.value(row).dims2();
        if rr != 1 || rc != c || group == 0 || r % group != 0 {
            return Err(Error::ShapeMismatch {
                op: "append_row_per_group",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(row).shape().to_vec(),
            });
        }
        let groups = r / group;
        let mut out = Tensor::zeros(groups * (group + 1), c);
        {
            let x = self.value(a).data();
            let shared = self.value(row).data();
            let o = out.data_mut();
            for g in 0..groups {
                let src = &x[g * group * c..(g + 1) * group * c];
                let dst_base = g * (group + 1);
                o[dst_base * c..(dst_base + group) * c].copy_from_slice(src);
                o[(dst_base + group) * c..(dst_base + group + 1) * c].copy_from_slice(shared);
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(out, ng, Op::AppendRowPerGroup { a, row, group }, "append_row_per_group")
    }

    /// Per-row log-sum-exp over masked entries; errors when a row selects
    /// nothing. `mask` is row-major over the same shape as `s`.
    pub fn masked_lse_rows(&mut self, s: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        let (r, c) = self.value(s).dims2();
        if mask.len() != r * c {
            return Err(Error::Contract(format!(
                "mask length {} does not cover a {r}x{c} matrix",
                mask.len()
            )));
        }
        let mut out = Tensor::zeros(r, 1);
        {
            let x = self.value(s).data();
            let o = out.data_mut();
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let mrow = &mask[i * c..(i + 1) * c];
                let mut max = f64::NEG_INFINITY;
                for (j, &m) in mrow.iter().enumerate() {
                    if m && row[j] > max {
                        max = row[j];
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::Contract(format!(
                        "masked_lse_rows: row {i} has no selected entries"
                    )));
                }
                let mut sum = 0.0;
                for (j, &m) in mrow.iter().enumerate() {
                    if m {
                        sum += (row[j] - max).exp();
                    }
                }
                o[i] = max + sum.ln();
            }
        }
        let ng = self.needs(s);
        self.push(out, ng, Op::MaskedLseRows { s, mask }, "masked_lse_rows")
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(total), ng, Op::SumAll { a }, "sum_all")
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel() as f64;
        let total: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(total / n), ng, Op::MeanAll { a }, "mean_all")
    }

    /// Mean binary cross-entropy over logits, in the stable softplus form.
    pub fn bce_with_logits_mean(&mut self, z: NodeId, targets: Vec<f64>) -> Result<NodeId> {
        let n = self.value(z).numel();
        if targets.len() != n {
            return Err(Error::Contract(format!(
                "bce targets length {} vs {} logits",
                targets.len(),
                n
            )));
        }
        let mut total = 0.0;
        for (&zi, &ti) in self.value(z).data().iter().zip(&targets) {
            total += kernels::softplus(zi) - ti * zi;
        }
        let ng = self.needs(z);
        self.push(
            Tensor::scalar(total / n as f64),
            ng,
            Op::BceWithLogitsMean { z, targets },
            "bce_with_logits_mean",
        )
    }

    // ── backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Gradients accumulate on every
    /// node with `needs_grad`; leaves never reached keep an empty gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        if self.nodes[loss].grad.is_none() {
            self.nodes[loss].grad = Some(vec![1.0]);
        }
        for id in (0..=loss).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            self.backward_node(id);
        }
        Ok(())
    }

    fn backward_node(&mut self, id: NodeId) {
        // Inputs always precede outputs, so split at `id` to read the node
        // while mutating input gradients. Gradient buffers are taken out of
        // their node, filled, and put back, which keeps the borrows disjoint
        // and handles ops whose two inputs are the same node.
        let (prefix, rest) = self.nodes.split_at_mut(id);
        let node = &rest[0];
        let g = node.grad.as_deref().expect("caller checked").to_vec();
        let g = &g[..];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, kdim) = prefix[*a].value.dims2();
                let n = prefix[*b].value.cols();
                if prefix[*a].needs_grad {
                    let mut ga = take_grad(&mut prefix[*a]);
                    kernels::matmul_bt_acc(g, prefix[*b].value.data(), &mut ga, m, n, kdim);
                    prefix[*a].grad = Some(ga);
                }
                if prefix[*b].needs_grad {
                    let mut gb = take_grad(&mut prefix[*b]);
                    kernels::matmul_ta_acc(prefix[*a].value.data(), g, &mut gb, m, kdim, n);
                    prefix[*b].grad = Some(gb);
                }
            }
            Op::MatMulBt { a, b } => {
                let (m, kdim) = prefix[*a].value.dims2();
                let n = prefix[*b].value.rows();
                if prefix[*a].needs_grad {
                    let mut ga = take_grad(&mut prefix[*a]);
                    kernels::matmul_acc(g, prefix[*b].value.data(), &mut ga, m, n, kdim);
                    prefix[*a].grad = Some(ga);
                }
                if prefix[*b].needs_grad {
                    let mut gb = take_grad(&mut prefix[*b]);
                    kernels::matmul_ta_acc(g, prefix[*a].value.data(), &mut gb, m, n, kdim);
                    prefix[*b].grad = Some(gb);
                }
            }
            Op::Add { a, b } => {
                for &src in &[*a, *b] {
                    if prefix[src].needs_grad {
                        let mut gs = take_grad(&mut prefix[src]);
                        acc_into(&mut gs, g, 1.0);
                        prefix[src].grad = Some(gs);
                    }
                }
            }
            Op::Sub { a, b } => {
                if prefix[*a].needs_grad {
                    let mut ga = take_grad(&mut prefix[*a]);
                    acc_into(&mut ga, g, 1.0);
                    prefix[*a].grad = Some(ga);
                }
                if prefix[*b].needs_grad {
                    let mut gb = take_grad(&mut prefix[*b]);
                    acc_into(&mut gb, g, -1.0);
                    prefix[*b].grad = Some(gb);
                }
            }
            Op::AddTiledRows { a, tile } => {
                let (r, c) = node.value.dims2();
                let tr = prefix[*tile].value.rows();
                if prefix[*a].needs_grad {
                    let mut ga = take_grad(&mut prefix[*a]);
                    acc_into(&mut ga, g, 1.0);
                    prefix[*a].grad = Some(ga);
                }
                if prefix[*tile].needs_grad {
                    let mut gt = take_grad(&mut prefix[*tile]);
                    for i in 0..r {
                        let trow = &mut gt[(i % tr) * c..(i % tr + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        for j in 0..c {
                            trow[j] += grow[j];
                        }
                    }
                    prefix[*tile].grad = Some(gt);
                }
            }
            Op::Scale { a, c } => {
                if prefix[*a].needs_grad {
                    let mut ga = take_grad(&mut prefix[*a]);
                    acc_into(&mut ga, g, *c);
                    prefix[*a].grad = Some(ga);
                }
            }
            Op::Gelu { a } => {
                if prefix[*a].needs_grad {
                    let mut ga = take_grad(&mut prefix[*a]);
                    for (i, (&xv, &gv)) in prefix[*a].value.data().iter().zip(g).enumerate() {
                        ga[i] += gv * kernels::gelu_grad(xv);
                    }
                    prefix[*a].grad = Some(ga);
                }
            }
            Op::SoftmaxRows { a } => {
                if prefix[*a].needs_grad {
                    let (r, c) = node.value.dims2();
                    let p = node.value.data();
                    let mut ga = take_grad(&mut prefix[*a]);
                    for i in 0..r {
                        let prow = &p[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let dotv = kernels::dot(grow, prow);
                        let garow = &mut ga[i * c..(i + 1) * c];
                        for j in 0..c {
                            garow[j] += prow[j] * (grow[j] - dotv);
                        }
                    }
                    prefix[*a].grad = Some(ga);
                }
            }
            Op::LayerNorm { a, affine, stats } => {
                let (r, c) = node.value.dims2();
                let cf = c as f64;
                // x_hat recomputed from the input and saved row stats
                let mut xhat = vec![0.0; r * c];
                {
                    let x = prefix[*a].value.data();
                    for i in 0..r {
                        let (mean, rstd) = stats[i];
                        for j in 0..c {
                            xhat[i * c + j] = (x[i * c + j] - mean) * rstd;
                        }
                    }
                }
                let gamma: Option<Vec<f64>> =
                    affine.map(|(gid, _)| prefix[gid].value.data().to_vec());
                if let Some((gid, bid)) = affine {
                    if prefix[*gid].needs_grad {
                        let mut gg = take_grad(&mut prefix[*gid]);
                        for i in 0..r {
                            for j in 0..c {
                                gg[j] += g[i * c + j] * xhat[i * c + j];
                            }
                        }
                        prefix[*gid].grad = Some(gg);
                    }
                    if prefix[*bid].needs_grad {
                        let mut gb = take_grad(&mut prefix[*bid]);
                        for i in 0..r {
                            for j in 0..c {
                                gb[j] += g[i * c + j];
                            }
                        }
                        prefix[*bid].grad = Some(gb);
                    }
                }
                if prefix[*a].needs_grad {
                    let mut ga = take_grad(&mut prefix[*a]);
                    for i in 0..r {
                        let (_, rstd) = stats[i];
                        let grow = &g[i * c..(i + 1) * c];
                        let xrow = &xhat[i * c..(i + 1) * c];
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for j in 0..c {
                            let gh = match &gamma {
                                Some(gv) => grow[j] * gv[j],
                                None => grow[j],
                            };
                            sum_g += gh;
                            sum_gx += gh * xrow[j];
                        }
                        let mg = sum_g / cf;
                        let mgx = sum_gx / cf;
                        let garow = &mut ga[i * c..(i + 1) * c];
                        for j in 0..c {
                            let gh = match &gamma {
                                Some(gv) => grow[j] * gv[j],
                                None => grow[j],
                            };
                            garow[j] += rstd * (gh - mg - xrow[j] * mgx);
                        }
                    }
                    prefix[*a].grad = Some(ga);
                }
            }
            Op::L2NormalizeRows { a, norms } => {
                if prefix[*a].needs_grad {
                    let (r, c) = node.value.dims2();
                    let y = node.value.data();
                    let mut ga = take_grad(&mut prefix[*a]);
                    for i in 0..r {
                        let yrow = &y[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let dotv = kernels::dot(grow, yrow);
                        let inv = 1.0 / norms[i];
                        let garow = &mut ga[i * c..(i + 1) * c];
                        for j in 0..c {
                            garow[j] += (grow[j] - yrow[j] * dotv) * inv;
                        }
                    }
                    prefix[*a].grad = Some(ga);
                }
            }
            Op::SelfAttention { q, k, v, heads, samples, seq, probs } => {
                let d = prefix[*q].value.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (nq, nk, nv) = (
                    prefix[*q].needs_grad,
                    prefix[*k].needs_grad,
                    prefix[*v].needs_grad,
                );
                let rows = samples * seq;
                let mut gq = vec![0.0; if nq { rows * d } else { 0 }];
                let mut gk = vec![0.0; if nk { rows * d } else { 0 }];
                let mut gvb = vec![0.0; if nv { rows * d } else { 0 }];
                {
                    let qv = prefix[*q].value.data();
                    let kv = prefix[*k].value.data();
                    let vv = prefix[*v].value.data();
                    let mut dp = vec![0.0; *seq];
                    let mut ds = vec![0.0; *seq];
                    for s in 0..*samples {
                        let base = s * seq;
                        for h in 0..*heads {
                            let off = h * dh;
                            let pbase = (s * heads + h) * seq * seq;
                            for i in 0..*seq {
                                let grow = &g[(base + i) * d + off..(base + i) * d + off + dh];
                                let prow = &probs[pbase + i * seq..pbase + (i + 1) * seq];
                                for j in 0..*seq {
                                    let vrow = &vv[(base + j) * d + off..(base + j) * d + off + dh];
                                    dp[j] = kernels::dot(grow, vrow);
                                    if nv {
                                        let gvrow = &mut gvb
                                            [(base + j) * d + off..(base + j) * d + off + dh];
                                        for t in 0..dh {
                                            gvrow[t] += prow[j] * grow[t];
                                        }
                                    }
                                }
                                if nq || nk {
                                    let dotv = kernels::dot(&dp, prow);
                                    for j in 0..*seq {
                                        ds[j] = prow[j] * (dp[j] - dotv) * scale;
                                    }
                                    if nq {
                                        let gqrow_base = (base + i) * d + off;
                                        for j in 0..*seq {
                                            let krow = &kv
                                                [(base + j) * d + off..(base + j) * d + off + dh];
                                            let gqrow = &mut gq[gqrow_base..gqrow_base + dh];
                                            for t in 0..dh {
                                                gqrow[t] += ds[j] * krow[t];
                                            }
                                        }
                                    }
                                    if nk {
                                        let qrow = &qv[(base + i) * d + off..(base + i) * d + off + dh];
                                        for j in 0..*seq {
                                            let gkrow = &mut gk
                                                [(base + j) * d + off..(base + j) * d + off + dh];
                                            for t in 0..dh {
                                                gkrow[t] += ds[j] * qrow[t];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if nq {
                    let mut buf = take_grad(&mut prefix[*q]);
                    acc_into(&mut buf, &gq, 1.0);
                    prefix[*q].grad = Some(buf);
                }
                if nk {
                    let mut buf = take_grad(&mut prefix[*k]);
                    acc_into(&mut buf, &gk, 1.0);
                    prefix[*k].grad = Some(buf);
                }
                if nv {
                    let mut buf = take_grad(&mut prefix[*v]);
                    acc_into(&mut buf, &gvb, 1.0);
                    prefix[*v].grad = Some(buf);
                }
            }
            Op::CrossAttendSingleKv { v, group } => {
                // Only the value path carries gradient; see the op comment.
                if prefix[*v].needs_grad {
                    let (vr, vd) = prefix[*v].value.dims2();
                    let mut gvb = take_grad(&mut prefix[*v]);
                    for s in 0..vr {
                        let grow = &mut gvb[s * vd..(s + 1) * vd];
                        for i in 0..*group {
                            let src = &g[(s * group + i) * vd..(s * group + i + 1) * vd];
                            for t in 0..vd {
                                grow[t] += src[t];
                            }
                        }
                    }
                    prefix[*v].grad = Some(gvb);
                }
            }
            Op::GatherRows { a, indices } => {
                if prefix[*a].needs_grad {
                    let c = node.value.cols();
                    let mut ga = take_grad(&mut prefix[*a]);
                    for (t, &i) in indices.iter().enumerate() {
                        let dst = &mut ga[i * c..(i + 1) * c];
                        let src = &g[t * c..(t + 1) * c];
                        for j in 0..c {
                            dst[j] += src[j];
                        }
                    }
                    prefix[*a].grad = Some(ga);
                }
            }
            Op::ScatterAddRows { base, delta, indices } => {
                let c = node.value.cols();
                if prefix[*base].needs_grad {
                    let mut gb = take_grad(&mut prefix[*base]);
                    acc_into(&mut gb, g, 1.0);
                    prefix[*base].grad = Some(gb);
                }
                if prefix[*delta].needs_grad {
                    let mut gd = take_grad(&mut prefix[*delta]);
                    for (t, &i) in indices.iter().enumerate() {
                        let dst = &mut gd[t * c..(t + 1) * c];
                        let src = &g[i * c..(i + 1) * c];
                        for j in 0..c {
                            dst[j] += src[j];
                        }
                    }
                    prefix[*delta].grad = Some(gd);
                }
            }
            Op::AppendRowPerGroup { a, row, group } => {
                let c = node.value.cols();
                let groups = node.value.rows() / (group + 1);
                if prefix[*a].needs_grad {
                    let mut ga = take_grad(&mut prefix[*a]);
                    for gidx in 0..groups {
                        let src_base = gidx * (group + 1);
                        let dst_base = gidx * group;
                        for i in 0..*group {
                            let dst = &mut ga[(dst_base + i) * c..(dst_base + i + 1) * c];
                            let src = &g[(src_base + i) * c..(src_base + i + 1) * c];
                            for j in 0..c {
                                dst[j] += src[j];
                            }
                        }
                    }
                    prefix[*a].grad = Some(ga);
                }
                if prefix[*row].needs_grad {
                    let mut gr = take_grad(&mut prefix[*row]);
                    for gidx in 0..groups {
                        let src = &g[(gidx * (group + 1) + group) * c
                            ..(gidx * (group + 1) + group + 1) * c];
                        for j in 0..c {
                            gr[j] += src[j];
                        }
                    }
                    prefix[*row].grad = Some(gr);
                }
            }
            Op::MaskedLseRows { s, mask } => {
                if prefix[*s].needs_grad {
                    let (r, c) = prefix[*s].value.dims2();
                    let lse = node.value.data();
                    let mut gs = take_grad(&mut prefix[*s]);
                    {
                        let x = prefix[*s].value.data();
                        for i in 0..r {
                            let gi = g[i];
                            for j in 0..c {
                                if mask[i * c + j] {
                                    gs[i * c + j] += gi * (x[i * c + j] - lse[i]).exp();
                                }
                            }
                        }
                    }
                    prefix[*s].grad = Some(gs);
                }
            }
            Op::SumAll { a } => {
                if prefix[*a].needs_grad {
                    let gi = g[0];
                    let mut ga = take_grad(&mut prefix[*a]);
                    for v in ga.iter_mut() {
                        *v += gi;
                    }
                    prefix[*a].grad = Some(ga);
                }
            }
            Op::MeanAll { a } => {
                if prefix[*a].needs_grad {
                    let n = prefix[*a].value.numel() as f64;
                    let gi = g[0] / n;
                    let mut ga = take_grad(&mut prefix[*a]);
                    for v in ga.iter_mut() {
                        *v += gi;
                    }
                    prefix[*a].grad = Some(ga);
                }
            }
            Op::BceWithLogitsMean { z, targets } => {
                if prefix[*z].needs_grad {
                    let n = targets.len() as f64;
                    let gi = g[0] / n;
                    let mut gz = take_grad(&mut prefix[*z]);
                    for (i, (&zi, &ti)) in prefix[*z].value.data().iter().zip(targets).enumerate() {
                        gz[i] += gi * (kernels::sigmoid(zi) - ti);
                    }
                    prefix[*z].grad = Some(gz);
                }
            }
        }
    }
}

fn take_grad(node: &mut Node) -> Vec<f64> {
    match node.grad.take() {
        Some(g) => g,
        None => vec![0.0; node.value.numel()],
    }
}

fn acc_into(dst: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    #[test]
    fn quadratic_gradient() {
        // f(x) = x·x at x = 3 → df/dx = 6
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.matmul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zero_grad() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::zeros(2, 2), true);
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let loss = tape.matmul(x, x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(p).is_none());
        assert_eq!(tape.grad_or_zeros(p), vec![0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn mean_of_matmul_matches_central_differences() {
        let mut rng = crate::test_rng(11);
        let a = Tensor::randn(3, 3, 1.0, &mut rng);
        let b = Tensor::randn(3, 3, 1.0, &mut rng);
        let err = finite_diff_check(
            &mut |params: &[Tensor], _want_grads: bool| {
                let mut tape = Tape::new();
                let pa = tape.leaf(params[0].clone(), true);
                let pb = tape.leaf(params[1].clone(), true);
                let prod = tape.matmul(pa, pb)?;
                let loss = tape.mean_all(prod)?;
                tape.backward(loss)?;
                Ok((
                    tape.scalar_value(loss),
                    Some(vec![tape.grad_or_zeros(pa), tape.grad_or_zeros(pb)]),
                ))
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn backward_twice_is_bitwise_identical() {
        let mut rng = crate::test_rng(5);
        let a = Tensor::randn(4, 6, 1.0, &mut rng);
        let b = Tensor::randn(6, 5, 1.0, &mut rng);
        let mut tape = Tape::new();
        let pa = tape.leaf(a, true);
        let pb = tape.leaf(b, true);
        let prod = tape.matmul(pa, pb).unwrap();
        let act = tape.gelu(prod).unwrap();
        let sm = tape.softmax_rows(act).unwrap();
        let loss = tape.mean_all(sm).unwrap();
        tape.backward(loss).unwrap();
        let g1a: Vec<u64> = tape.grad(pa).unwrap().iter().map(|v| v.to_bits()).collect();
        let g1b: Vec<u64> = tape.grad(pb).unwrap().iter().map(|v| v.to_bits()).collect();
        tape.zero_grads();
        tape.backward(loss).unwrap();
        let g2a: Vec<u64> = tape.grad(pa).unwrap().iter().map(|v| v.to_bits()).collect();
        let g2b: Vec<u64> = tape.grad(pb).unwrap().iter().map(|v| v.to_bits()).collect();
        assert_eq!(g1a, g2a);
        assert_eq!(g1b, g2b);
    }

    /// One composite graph touching every op family, checked against central
    /// differences at 20 seeds.
    #[test]
    fn every_op_passes_gradient_check_over_seeds() {
        for seed in 0..20u64 {
            let mut rng = crate::test_rng(seed);
            let params = vec![
                Tensor::randn(6, 8, 0.7, &mut rng),  // q
                Tensor::randn(6, 8, 0.7, &mut rng),  // k
                Tensor::randn(6, 8, 0.7, &mut rng),  // v
                Tensor::randn(8, 4, 0.7, &mut rng),  // w
                Tensor::randn(1, 4, 0.5, &mut rng),  // bias
                Tensor::randn(1, 8, 0.3, &mut rng),  // gamma
                Tensor::randn(1, 8, 0.3, &mut rng),  // beta
                Tensor::randn(2, 4, 0.8, &mut rng),  // kv token per group
                Tensor::randn(2, 8, 0.4, &mut rng),  // tile
            ];
            let mask: Vec<bool> = (0..64).map(|i| i % 3 != 1 || i % 7 == 0).collect();
            let targets: Vec<f64> = vec![1.0, 0.0, 1.0];
            let col = Tensor::new(vec![8, 1], (0..8).map(|i| 0.1 * (i as f64 + 1.0)).collect()).unwrap();

            let err = finite_diff_check(
                &mut |p: &[Tensor], _| {
                    let mut tape = Tape::new();
                    let q = tape.leaf(p[0].clone(), true);
                    let k = tape.leaf(p[1].clone(), true);
                    let v = tape.leaf(p[2].clone(), true);
                    let w = tape.leaf(p[3].clone(), true);
                    let bias = tape.leaf(p[4].clone(), true);
                    let gamma = tape.leaf(p[5].clone(), true);
                    let beta = tape.leaf(p[6].clone(), true);
                    let kv = tape.leaf(p[7].clone(), true);
                    let tile = tape.leaf(p[8].clone(), true);

                    // self-attention over 2 samples x 3 tokens, 2 heads
                    let attn = tape.self_attention(q, k, v, 2, 2, 3)?;
                    let normed = tape.layer_norm(attn, 1e-5, Some((gamma, beta)))?;
                    let addq = tape.add(normed, q)?;
                    let subk = tape.sub(addq, k)?;
                    let proj = tape.matmul(subk, w)?;
                    let biased = tape.add_bias(proj, bias)?;
                    let act = tape.gelu(biased)?;
                    // cross-attend 3 rows per group against one kv row each
                    let cross = tape.cross_attend_single_kv(act, kv, kv, 3)?;
                    let mixed = tape.add(cross, act)?;
                    let gathered = tape.gather_rows(mixed, vec![0, 2, 4, 5])?;
                    let scat = tape.scatter_add_rows(mixed, gathered, vec![1, 3, 0, 2])?;
                    let appended = tape.append_row_per_group(scat, bias, 3)?;
                    let sims = tape.matmul_bt(appended, appended)?;
                    let scaled = tape.scale(sims, 0.5)?;
                    let sm = tape.softmax_rows(scaled)?;
                    let tiled = tape.add_tiled_rows(sm, tile)?;
                    let normalized = tape.l2_normalize_rows(tiled)?;
                    let lse = tape.masked_lse_rows(normalized, mask.clone())?;
                    let s1 = tape.sum_all(lse)?;
                    let pooled = tape.gather_rows(normalized, vec![1, 4, 7])?;
                    let colid = tape.constant(col.clone());
                    let logits = tape.matmul(pooled, colid)?;
                    let bce = tape.bce_with_logits_mean(logits, targets.clone())?;
                    let s2 = tape.scale(bce, 2.0)?;
                    let m = tape.mean_all(tiled)?;
                    let partial = tape.add(s1, s2)?;
                    let loss = tape.add(partial, m)?;
                    tape.backward(loss)?;
                    let grads = vec![
                        tape.grad_or_zeros(q),
                        tape.grad_or_zeros(k),
                        tape.grad_or_zeros(v),
                        tape.grad_or_zeros(w),
                        tape.grad_or_zeros(bias),
                        tape.grad_or_zeros(gamma),
                        tape.grad_or_zeros(beta),
                        tape.grad_or_zeros(kv),
                        tape.grad_or_zeros(tile),
                    ];
                    Ok((tape.scalar_value(loss), Some(grads)))
                },
                &params,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn masked_lse_empty_row_is_an_error() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::zeros(2, 2), true);
        let err = tape.masked_lse_rows(s, vec![true, true, false, false]);
        assert!(err.is_err());
    }

    #[test]
    fn finite_check_flags_overflow_when_enabled() {
        let mut tape = Tape::new();
        tape.set_check_finite(true);
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1e308, 1e308]).unwrap(), true);
        let doubled = tape.add(x, x);
        assert!(matches!(doubled, Err(Error::NonFinite(_))));
    }
}
