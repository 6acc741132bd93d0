//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! buffer and a backward rule, so creation order is already a topological
//! order. [`Graph::backward`] walks the tape once in reverse. Tensors are
//! lightweight handles into the tape; node buffers are immutable after
//! creation except for gradient accumulation.
//!
//! Determinism: all kernels are single-threaded and reduce every output
//! element in a fixed order, so identical inputs give bit-identical
//! outputs.

use crate::error::{HubError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    MatMul(usize, usize),
    /// `a @ b^T` where `a` is m×k and `b` is n×k.
    MatMulNT(usize, usize),
    GatherRows {
        table: usize,
        ids: Vec<u32>,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    CausalAttention {
        q: usize,
        k: usize,
        v: usize,
        n_heads: usize,
        /// Attention probabilities saved at forward time: `[head][t][j]`,
        /// zero for j > t.
        probs: Vec<f32>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    RmsNorm {
        x: usize,
        weight: usize,
        /// 1/rms per row, saved at forward time.
        inv_rms: Vec<f32>,
    },
    Gelu(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<u32>,
        /// log-sum-exp per row, saved at forward time.
        lse: Vec<f32>,
    },
    Sum(usize),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Dynamically built computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn check_shape(&self, shape: &[usize], data_len: usize) -> Result<()> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(HubError::shape(format!("dimensions must be positive, got {shape:?}")));
        }
        if numel(shape) != data_len {
            return Err(HubError::shape(format!(
                "shape {shape:?} implies {} elements, data has {data_len}",
                numel(shape)
            )));
        }
        Ok(())
    }

    /// Leaf that does not track gradients.
    pub fn constant(&mut self, data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        self.check_shape(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Leaf that tracks gradients (copies the data onto the tape).
    pub fn param(&mut self, data: &[f32], shape: &[usize]) -> Result<Tensor> {
        self.check_shape(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data.to_vec(), true, Op::Leaf))
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn data(&self, t: Tensor) -> &[f32] {
        &self.nodes[t.0].data
    }

    /// Gradient of `t`, if backward has run and `t` requires grad.
    pub fn grad(&self, t: Tensor) -> Option<&[f32]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Value of a scalar (single-element) tensor.
    pub fn value(&self, t: Tensor) -> f32 {
        debug_assert_eq!(self.nodes[t.0].data.len(), 1);
        self.nodes[t.0].data[0]
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn out_grad(&mut self, a: usize, b: usize) -> bool {
        self.nodes[a].requires_grad || self.nodes[b].requires_grad
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(HubError::shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.out_grad(a.0, b.0);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Add(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(HubError::shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.out_grad(a.0, b.0);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Tensor, c: f32) -> Result<Tensor> {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Scale(a.0, c)))
    }

    pub fn gelu(&mut self, a: Tensor) -> Result<Tensor> {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|&x| gelu(x)).collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Gelu(a.0)))
    }

    // ── matrix products ─────────────────────────────────────────────────

    /// `a[m×k] @ b[k×n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(HubError::shape(format!("matmul: {sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            m,
            k,
            n,
            &mut out,
            false,
        );
        let rg = self.out_grad(a.0, b.0);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a.0, b.0)))
    }

    /// `a[m×k] @ b[n×k]^T`.
    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(HubError::shape(format!("matmul_nt: {sa:?} @ {sb:?}^T")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            m,
            k,
            n,
            &mut out,
            false,
        );
        let rg = self.out_grad(a.0, b.0);
        Ok(self.push(vec![m, n], out, rg, Op::MatMulNT(a.0, b.0)))
    }

    // ── row selection ───────────────────────────────────────────────────

    /// Select rows of `table[r×d]` by id (embedding lookup).
    pub fn gather_rows(&mut self, table: Tensor, ids: &[u32]) -> Result<Tensor> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(HubError::shape(format!("gather_rows: table {st:?}")));
        }
        let (r, d) = (st[0], st[1]);
        if ids.is_empty() {
            return Err(HubError::usage("gather_rows: empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| (i as usize) >= r) {
            return Err(HubError::index(format!("gather_rows: id {bad} >= {r}")));
        }
        let src = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id as usize * d..(id as usize + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Contiguous row range of a 2-d tensor.
    pub fn slice_rows(&mut self, x: Tensor, start: usize, rows: usize) -> Result<Tensor> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(HubError::shape(format!("slice_rows: {s:?}")));
        }
        let (r, d) = (s[0], s[1]);
        if rows == 0 || start + rows > r {
            return Err(HubError::index(format!(
                "slice_rows: rows {start}..{} of {r}",
                start + rows
            )));
        }
        let data = self.nodes[x.0].data[start * d..(start + rows) * d].to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![rows, d], data, rg, Op::SliceRows { x: x.0, start }))
    }

    /// Stack 2-d tensors with equal column count along rows.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(HubError::usage("concat_rows: no parts"));
        }
        let d = self.shape(parts[0])[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(HubError::shape(format!("concat_rows: {s:?} vs width {d}")));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * d);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let rg = parts.iter().any(|&p| self.nodes[p.0].requires_grad);
        Ok(self.push(
            vec![rows, d],
            data,
            rg,
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
        ))
    }

    // ── structured ops ──────────────────────────────────────────────────

    /// Multi-head causal self-attention over one sequence.
    ///
    /// `q`, `k`, `v` are `[T×d]`; head `h` uses the column block
    /// `h*d/n_heads..`. Position `t` attends to positions `0..=t` with
    /// scores scaled by `1/sqrt(d/n_heads)`.
    pub fn causal_attention(
        &mut self,
        q: Tensor,
        k: Tensor,
        v: Tensor,
        n_heads: usize,
    ) -> Result<Tensor> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || self.shape(k) != s || self.shape(v) != s {
            return Err(HubError::shape(format!(
                "causal_attention: q {:?}, k {:?}, v {:?}",
                s,
                self.shape(k),
                self.shape(v)
            )));
        }
        let (t_len, d) = (s[0], s[1]);
        if n_heads == 0 || d % n_heads != 0 {
            return Err(HubError::shape(format!(
                "causal_attention: d_model {d} not divisible by n_heads {n_heads}"
            )));
        }
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let qd = &self.nodes[q.0].data;
        let kd = &self.nodes[k.0].data;
        let vd = &self.nodes[v.0].data;
        let mut out = vec![0.0f32; t_len * d];
        let mut probs = vec![0.0f32; n_heads * t_len * t_len];
        let mut scores = vec![0.0f32; t_len];
        for h in 0..n_heads {
            let col = h * hd;
            for t in 0..t_len {
                let q_row = &qd[t * d + col..t * d + col + hd];
                for (j, slot) in scores[..=t].iter_mut().enumerate() {
                    *slot = scale * dot(q_row, &kd[j * d + col..j * d + col + hd]);
                }
                softmax_inplace(&mut scores[..=t]);
                let p_row = &mut probs[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                p_row.copy_from_slice(&scores[..=t]);
                let out_row = &mut out[t * d + col..t * d + col + hd];
                for j in 0..=t {
                    axpy(out_row, p_row[j], &vd[j * d + col..j * d + col + hd]);
                }
            }
        }
        let rg = self.nodes[q.0].requires_grad
            || self.nodes[k.0].requires_grad
            || self.nodes[v.0].requires_grad;
        Ok(self.push(
            s,
            out,
            rg,
            Op::CausalAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                n_heads,
                probs,
            },
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(HubError::usage(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = &self.nodes[x.0].data;
        let mut out = src.clone();
        let mut lane = vec![0.0f32; n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for (j, slot) in lane.iter_mut().enumerate() {
                    *slot = src[base + j * inner];
                }
                softmax_inplace(&mut lane);
                for (j, &v) in lane.iter().enumerate() {
                    out[base + j * inner] = v;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, out, rg, Op::Softmax { x: x.0, axis }))
    }

    /// `y_i = weight_i * x_i / sqrt(mean(x^2) + eps)`, applied per row of the
    /// trailing dimension.
    pub fn rms_norm(&mut self, x: Tensor, weight: Tensor, eps: f32) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let sw = self.shape(weight);
        if sw != [d] {
            return Err(HubError::shape(format!(
                "rms_norm: weight {sw:?} vs trailing dim {d}"
            )));
        }
        let rows = numel(&shape) / d;
        let src = &self.nodes[x.0].data;
        let w = &self.nodes[weight.0].data;
        let mut out = vec![0.0f32; src.len()];
        let mut inv_rms = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let ms: f32 = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms[r] = inv;
            let dst = &mut out[r * d..(r + 1) * d];
            for i in 0..d {
                dst[i] = w[i] * row[i] * inv;
            }
        }
        let rg = self.out_grad(x.0, weight.0);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::RmsNorm {
                x: x.0,
                weight: weight.0,
                inv_rms,
            },
        ))
    }

    /// Mean over positions of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Tensor, targets: &[u32]) -> Result<Tensor> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(HubError::shape(format!("cross_entropy: logits {s:?}")));
        }
        let (t_len, v) = (s[0], s[1]);
        if targets.len() != t_len {
            return Err(HubError::shape(format!(
                "cross_entropy: {} targets for {t_len} positions",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| (t as usize) >= v) {
            return Err(HubError::index(format!("cross_entropy: target {bad} >= {v}")));
        }
        let src = &self.nodes[logits.0].data;
        let mut lse = vec![0.0f32; t_len];
        let mut total = 0.0f64;
        for t in 0..t_len {
            let row = &src[t * v..(t + 1) * v];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = row.iter().map(|&x| (x - m).exp()).sum();
            lse[t] = m + sum.ln();
            total += f64::from(lse[t] - row[targets[t] as usize]);
        }
        let loss = (total / t_len as f64) as f32;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                lse,
            },
        ))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Tensor) -> Result<Tensor> {
        let total: f32 = self.nodes[x.0].data.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![1], vec![total], rg, Op::Sum(x.0)))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Populate gradients on every reachable `requires_grad` tensor.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.backward_done {
            return Err(HubError::usage(
                "backward already ran on this graph; reset_grads first",
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(HubError::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            self.backward_node(idx);
        }
        Ok(())
    }

    /// Clear gradients so backward may run again (used by tests; training
    /// builds a fresh graph per step).
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Apply one node's backward rule, accumulating into its inputs.
    fn backward_node(&mut self, idx: usize) {
        // Detach the output grad and the op record so the borrow checker
        // allows mutating input nodes; both are restored at the end.
        let gy = self.nodes[idx].grad.take().unwrap();
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |g| add_assign(g, &gy));
                self.accumulate(b, |g| add_assign(g, &gy));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    let other = self.nodes[b].data.clone();
                    self.accumulate(a, |g| {
                        for ((gi, &gyi), &oi) in g.iter_mut().zip(&gy).zip(&other) {
                            *gi += gyi * oi;
                        }
                    });
                }
                if self.nodes[b].requires_grad {
                    let other = self.nodes[a].data.clone();
                    self.accumulate(b, |g| {
                        for ((gi, &gyi), &oi) in g.iter_mut().zip(&gy).zip(&other) {
                            *gi += gyi * oi;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accumulate(a, |g| {
                    for (gi, &gyi) in g.iter_mut().zip(&gy) {
                        *gi += gyi * c;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.nodes[a].requires_grad {
                    let bd = self.take_data(b, a);
                    self.accumulate(a, |g| matmul_nt(&gy, &bd, m, n, k, g, true));
                    self.restore_data(b, a, bd);
                }
                if self.nodes[b].requires_grad {
                    let ad = self.take_data(a, b);
                    self.accumulate(b, |g| matmul_tn(&ad, &gy, m, k, n, g, true));
                    self.restore_data(a, b, ad);
                }
            }
            Op::MatMulNT(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[0];
                if self.nodes[a].requires_grad {
                    let bd = self.take_data(b, a);
                    self.accumulate(a, |g| matmul_nn(&gy, &bd, m, n, k, g, true));
                    self.restore_data(b, a, bd);
                }
                if self.nodes[b].requires_grad {
                    let ad = self.take_data(a, b);
                    self.accumulate(b, |g| matmul_tn(&gy, &ad, m, n, k, g, true));
                    self.restore_data(a, b, ad);
                }
            }
            Op::GatherRows { table, ids } => {
                let table = *table;
                let d = self.nodes[table].shape[1];
                self.accumulate(table, |g| {
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                        add_assign(dst, &gy[row * d..(row + 1) * d]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                let d = self.nodes[x].shape[1];
                let off = start * d;
                self.accumulate(x, |g| add_assign(&mut g[off..off + gy.len()], &gy));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].data.len();
                    if self.nodes[p].requires_grad {
                        let seg = &gy[off..off + len];
                        self.accumulate(p, |g| add_assign(g, seg));
                    }
                    off += len;
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                probs,
            } => {
                let (q, k, v, n_heads) = (*q, *k, *v, *n_heads);
                let t_len = self.nodes[q].shape[0];
                let d = self.nodes[q].shape[1];
                let hd = d / n_heads;
                let scale = 1.0 / (hd as f32).sqrt();
                let qd = self.nodes[q].data.clone();
                let kd = self.nodes[k].data.clone();
                let vd = self.nodes[v].data.clone();
                let mut dq = vec![0.0f32; t_len * d];
                let mut dk = vec![0.0f32; t_len * d];
                let mut dv = vec![0.0f32; t_len * d];
                let mut dp = vec![0.0f32; t_len];
                for h in 0..n_heads {
                    let col = h * hd;
                    for t in 0..t_len {
                        let p_row =
                            &probs[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                        let go = &gy[t * d + col..t * d + col + hd];
                        // dV[j] += p[j]·gO; dP[j] = gO · V[j]
                        for j in 0..=t {
                            axpy(&mut dv[j * d + col..j * d + col + hd], p_row[j], go);
                            dp[j] = dot(go, &vd[j * d + col..j * d + col + hd]);
                        }
                        // dS = P ⊙ (dP − Σ p·dP); dQ_t += scale·Σ dS_j K_j;
                        // dK_j += scale·dS_j Q_t
                        let mix: f32 = (0..=t).map(|j| p_row[j] * dp[j]).sum();
                        let q_row = &qd[t * d + col..t * d + col + hd];
                        for j in 0..=t {
                            let ds = p_row[j] * (dp[j] - mix) * scale;
                            axpy(
                                &mut dq[t * d + col..t * d + col + hd],
                                ds,
                                &kd[j * d + col..j * d + col + hd],
                            );
                            axpy(&mut dk[j * d + col..j * d + col + hd], ds, q_row);
                        }
                    }
                }
                self.accumulate(q, |g| add_assign(g, &dq));
                self.accumulate(k, |g| add_assign(g, &dk));
                self.accumulate(v, |g| add_assign(g, &dv));
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let shape = self.nodes[idx].shape.clone();
                let (outer, n, inner) = split_axis(&shape, axis);
                let y = self.nodes[idx].data.clone();
                let mut dx = vec![0.0f32; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut mix = 0.0f32;
                        for j in 0..n {
                            mix += gy[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..n {
                            let pos = base + j * inner;
                            dx[pos] = y[pos] * (gy[pos] - mix);
                        }
                    }
                }
                self.accumulate(x, |g| add_assign(g, &dx));
            }
            Op::RmsNorm {
                x,
                weight,
                inv_rms,
            } => {
                let (x, weight) = (*x, *weight);
                let d = *self.nodes[idx].shape.last().unwrap();
                let rows = self.nodes[x].data.len() / d;
                let xd = self.nodes[x].data.clone();
                let wd = self.nodes[weight].data.clone();
                if self.nodes[x].requires_grad {
                    let mut dx = vec![0.0f32; xd.len()];
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        let row = &xd[r * d..(r + 1) * d];
                        let gyr = &gy[r * d..(r + 1) * d];
                        let mut mix = 0.0f32;
                        for i in 0..d {
                            mix += gyr[i] * wd[i] * row[i];
                        }
                        let c = inv * inv * inv * mix / d as f32;
                        let dst = &mut dx[r * d..(r + 1) * d];
                        for i in 0..d {
                            dst[i] = inv * wd[i] * gyr[i] - c * row[i];
                        }
                    }
                    self.accumulate(x, |g| add_assign(g, &dx));
                }
                if self.nodes[weight].requires_grad {
                    let mut dw = vec![0.0f32; d];
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        let row = &xd[r * d..(r + 1) * d];
                        let gyr = &gy[r * d..(r + 1) * d];
                        for i in 0..d {
                            dw[i] += gyr[i] * row[i] * inv;
                        }
                    }
                    self.accumulate(weight, |g| add_assign(g, &dw));
                }
            }
            Op::Gelu(a) => {
                let a = *a;
                let xd = self.nodes[a].data.clone();
                self.accumulate(a, |g| {
                    for (i, gi) in g.iter_mut().enumerate() {
                        *gi += gy[i] * gelu_grad(xd[i]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                lse,
            } => {
                let logits = *logits;
                let v = self.nodes[logits].shape[1];
                let t_len = targets.len();
                let ld = self.nodes[logits].data.clone();
                let g0 = gy[0] / t_len as f32;
                self.accumulate(logits, |g| {
                    for t in 0..t_len {
                        let row = &ld[t * v..(t + 1) * v];
                        let dst = &mut g[t * v..(t + 1) * v];
                        for j in 0..v {
                            let p = (row[j] - lse[t]).exp();
                            let hit = if j as u32 == targets[t] { 1.0 } else { 0.0 };
                            dst[j] += g0 * (p - hit);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let a = *a;
                let g0 = gy[0];
                self.accumulate(a, |g| {
                    for gi in g.iter_mut() {
                        *gi += g0;
                    }
                });
            }
        }
        self.nodes[idx].op = op;
        self.nodes[idx].grad = Some(gy);
    }

    /// Move a node's data buffer out for kernel use, cloning instead when the
    /// two operands alias.
    fn take_data(&mut self, from: usize, other: usize) -> Vec<f32> {
        if from == other {
            self.nodes[from].data.clone()
        } else {
            std::mem::take(&mut self.nodes[from].data)
        }
    }

    fn restore_data(&mut self, to: usize, other: usize, data: Vec<f32>) {
        if to != other {
            self.nodes[to].data = data;
        }
    }

    fn accumulate(&mut self, target: usize, f: impl FnOnce(&mut [f32])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let mut g = self.nodes[target].grad.take().unwrap();
        f(&mut g);
        self.nodes[target].grad = Some(g);
    }

    /// Error if the tensor holds any NaN/Inf.
    pub fn check_finite(&self, t: Tensor, what: &str) -> Result<()> {
        if self.nodes[t.0].data.iter().any(|v| !v.is_finite()) {
            return Err(HubError::usage(format!("non-finite values in {what}")));
        }
        Ok(())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

// ── scalar math ─────────────────────────────────────────────────────────

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Stable softmax of a small slice, in place.
pub fn softmax_inplace(x: &mut [f32]) {
    let m = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

/// `weight_i * x_i / sqrt(mean(x^2) + eps)` for a single vector.
pub fn rms_norm_vec(x: &[f32], weight: &[f32], eps: f32) -> Vec<f32> {
    let d = x.len();
    let ms: f32 = x.iter().map(|v| v * v).sum::<f32>() / d as f32;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(weight).map(|(&xi, &wi)| wi * xi * inv).collect()
}

/// `mat[rows×cols] · v` as per-row dot products.
pub fn matvec(mat: &[f32], rows: usize, cols: usize, v: &[f32]) -> Vec<f32> {
    debug_assert_eq!(mat.len(), rows * cols);
    debug_assert_eq!(v.len(), cols);
    (0..rows).map(|r| dot(&mat[r * cols..(r + 1) * cols], v)).collect()
}

// ── kernels ─────────────────────────────────────────────────────────────

#[inline]
fn add_assign(y: &mut [f32], x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += *xi;
    }
}

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    const LANES: usize = 8;
    let n = y.len();
    for (yc, xc) in y.chunks_exact_mut(LANES).zip(x.chunks_exact(LANES)) {
        for l in 0..LANES {
            yc[l] = xc[l].mul_add(a, yc[l]);
        }
    }
    for i in n - n % LANES..n {
        y[i] = x[i].mul_add(a, y[i]);
    }
}

/// Dot product with a fixed combination order (eight accumulator lanes),
/// so the result is identical no matter how callers are scheduled.
#[inline]
pub(crate) fn dot(x: &[f32], y: &[f32]) -> f32 {
    const LANES: usize = 8;
    let n = x.len();
    let mut acc = [0.0f32; LANES];
    for (xc, yc) in x.chunks_exact(LANES).zip(y.chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] = xc[l].mul_add(yc[l], acc[l]);
        }
    }
    let mut tail = 0.0f32;
    for i in n - n % LANES..n {
        tail = x[i].mul_add(y[i], tail);
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

// Register block: MR output rows by NR output columns. Column strips are
// the outer loop so one B panel (k x NR, a few KB) stays cache-resident
// while every row tile streams past it. Each output element's reduction
// runs over k in ascending order regardless of blocking, so results do not
// depend on tile boundaries.
const MR: usize = 4;
const NR: usize = 16;

/// `tile (+)= A-slice @ B` for one column strip, A element addressed via
/// `a_at(row, kk)`.
#[inline]
fn strip_kernel(
    out: &mut [f32],
    rows_total: usize,
    n: usize,
    k: usize,
    b: &[f32],
    j0: usize,
    nr: usize,
    accumulate: bool,
    a_at: impl Fn(usize, usize) -> f32 + Copy,
) {
    let mut i0 = 0;
    while i0 < rows_total {
        let rows = MR.min(rows_total - i0);
        if rows == MR && nr == NR {
            let mut acc = [[0.0f32; NR]; MR];
            if accumulate {
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    acc_row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
                }
            }
            for kk in 0..k {
                let b_blk = &b[kk * n + j0..kk * n + j0 + NR];
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = a_at(i0 + r, kk);
                    for l in 0..NR {
                        acc_row[l] = b_blk[l].mul_add(av, acc_row[l]);
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(acc_row);
            }
        } else {
            for r in 0..rows {
                let dst = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + nr];
                if !accumulate {
                    dst.fill(0.0);
                }
                for kk in 0..k {
                    let av = a_at(i0 + r, kk);
                    let b_blk = &b[kk * n + j0..kk * n + j0 + nr];
                    for l in 0..nr {
                        dst[l] = b_blk[l].mul_add(av, dst[l]);
                    }
                }
            }
        }
        i0 += rows;
    }
}

pub(crate) fn matmul_nn(
    a: &[f32],
    b: &[f32],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut j0 = 0;
    while j0 < n {
        let nr = NR.min(n - j0);
        strip_kernel(out, m, n, k, b, j0, nr, accumulate, |r, kk| a[r * k + kk]);
        j0 += nr;
    }
}

/// `out[m×n] (+)= a[k×m]^T @ b[k×n]`.
pub(crate) fn matmul_tn(
    a: &[f32],
    b: &[f32],
    k: usize,
    m: usize,
    n: usize,
    out: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut j0 = 0;
    while j0 < n {
        let nr = NR.min(n - j0);
        strip_kernel(out, m, n, k, b, j0, nr, accumulate, |r, kk| a[kk * m + r]);
        j0 += nr;
    }
}

/// `out[m×n] (+)= a[m×k] @ b[n×k]^T`, implemented by transposing `b` once
/// and reusing the strip kernel. The copy is cheap next to the product and
/// keeps the inner loop on contiguous panels.
pub(crate) fn matmul_nt(
    a: &[f32],
    b: &[f32],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let mut bt = vec![0.0f32; k * n];
    for j in 0..n {
        for kk in 0..k {
            bt[kk * n + j] = b[j * k + kk];
        }
    }
    matmul_nn(a, &bt, m, k, n, out, accumulate);
}

// ── optimizer ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. State layout mirrors the parameter
/// list handed to [`AdamW::new`].
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, param_sizes: &[usize]) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.cfg.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters, in the order given at construction.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(HubError::shape(format!(
                "adamw: {} params / {} grads for {} state slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let c = &self.cfg;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(HubError::shape(format!(
                    "adamw: param {i} has {} elements, state has {}",
                    p.len(),
                    self.m[i].len()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}
