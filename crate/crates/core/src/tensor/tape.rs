// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use super::kernels::{self, gelu_grad_from_tanh, gelu_with_tanh, log_sum_exp, softmax_row};
use super::{Result, Tensor, TensorError, LAYER_NORM_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu {
        x: Var,
        tanh: Vec<f32>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f32>,
        row_start: Vec<usize>,
        offsets: Vec<usize>,
    },
    GradReverse {
        x: Var,
        eta: f32,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Vec<f32>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed differentiable operations.
///
/// Backward walks nodes in exact reverse push order. A tape can run backward
/// once; call [`Tape::reset_grads`] before running it again.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    consumed: bool,
}

fn requires_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(TensorError::Shape {
            op,
            left: t.shape().to_vec(),
            right: vec![0, 0],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize, f: impl FnOnce(&mut [f32])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a leaf. Shared tensors are not copied.
    pub fn leaf(&mut self, value: impl Into<Arc<Tensor>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        let shape = self.nodes[v.0].value.shape().to_vec();
        Some(Tensor::new(shape, g.clone()).expect("gradient shape matches value"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Clears gradients so backward may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (p, q) = requires_2d("matmul", ta)?;
        let (q2, r) = requires_2d("matmul", tb)?;
        if q != q2 {
            return Err(TensorError::Shape {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; p * r];
        kernels::gemm_acc(ta.data(), tb.data(), p, q, r, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![p, r], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::Shape {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`c` row to every row of an `n×c` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (_, c) = requires_2d("add_row", tx)?;
        if tr.len() != c {
            return Err(TensorError::Shape {
                op: "add_row",
                left: tx.shape().to_vec(),
                right: tr.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::Shape {
                op: "mul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Scale(x, s), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (data, tanh): (Vec<f32>, Vec<f32>) = tx.data().iter().map(|&v| gelu_with_tanh(v)).unzip();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gelu { x, tanh }, rg))
    }

    /// Row-wise layer norm over the trailing dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = requires_2d("layer_norm", tx)?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != c || tb.len() != c {
            return Err(TensorError::Shape {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let mut normed = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = tx.row(i);
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                normed[i * c + j] = xh;
                out[i * c + j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// Gathers rows of a `V×d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = requires_2d("embedding", tt)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s as f32), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(TensorError::Contract("mean of empty tensor".into()));
        }
        let s: f64 = tx.data().iter().map(|&v| v as f64).sum();
        let m = (s / tx.len() as f64) as f32;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    /// Mean over rows: `n×c → 1×c`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = requires_2d("mean_rows", tx)?;
        if n == 0 {
            return Err(TensorError::Contract("mean_rows of zero rows".into()));
        }
        let mut acc = vec![0.0f32; c];
        for i in 0..n {
            for (a, &v) in acc.iter_mut().zip(tx.row(i)) {
                *a += v;
            }
        }
        let inv = 1.0 / n as f32;
        acc.iter_mut().for_each(|a| *a *= inv);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![1, c], acc)?, Op::MeanRows(x), rg))
    }

    /// Rows `start..end` of a matrix (a token range).
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = requires_2d("slice_rows", tx)?;
        if start >= end || end > n {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: end.max(start),
                bound: n,
            });
        }
        let data = tx.data()[start * c..end * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![end - start, c], data)?, Op::SliceRows { x, start }, rg))
    }

    /// Multi-head causal scaled dot-product attention on already-projected
    /// `q`, `k`, `v` (each `n×d`). Heads split the trailing dimension.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let n = self.value(q).shape().first().copied().unwrap_or(0);
        self.segmented_causal_attention(q, k, v, heads, &vec![0; n])
    }

    /// Causal attention over packed sequences: row `i` attends to rows
    /// `row_start[i]..=i`, so independent sequences can share one tape.
    pub fn segmented_causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        row_start: &[usize],
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = requires_2d("causal_attention", tq)?;
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(TensorError::Shape {
                op: "causal_attention",
                left: tq.shape().to_vec(),
                right: tk.shape().to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Parameter(format!(
                "{d} columns not divisible into {heads} heads"
            )));
        }
        if row_start.len() != n {
            return Err(TensorError::Shape {
                op: "causal_attention",
                left: tq.shape().to_vec(),
                right: vec![row_start.len()],
            });
        }
        if let Some(i) = (0..n).find(|&i| row_start[i] > i) {
            return Err(TensorError::Index {
                op: "causal_attention",
                index: row_start[i],
                bound: i + 1,
            });
        }
        // probabilities are stored packed: row i owns i - start + 1 entries
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0usize);
        for i in 0..n {
            offsets.push(offsets[i] + i + 1 - row_start[i]);
        }
        let total = offsets[n];
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0f32; heads * total];
        let mut out = vec![0.0f32; n * d];
        let mut scores = vec![0.0f32; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let s0 = row_start[i];
                let w = i + 1 - s0;
                let qi = &tq.row(i)[off..off + dh];
                for (jj, s) in scores[..w].iter_mut().enumerate() {
                    let kj = &tk.row(s0 + jj)[off..off + dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                let base = h * total + offsets[i];
                let p = &mut probs[base..base + w];
                softmax_row(&scores[..w], p);
                let out_row = &mut out[i * d + off..i * d + off + dh];
                for (jj, &pij) in p.iter().enumerate() {
                    let vj = &tv.row(s0 + jj)[off..off + dh];
                    for (o, &vv) in out_row.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
                row_start: row_start.to_vec(),
                offsets,
            },
            rg,
        ))
    }

    /// Identity forward; backward multiplies the incoming gradient by `-eta`.
    pub fn grad_reverse(&mut self, x: Var, eta: f32) -> Result<Var> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(TensorError::Parameter(format!(
                "gradient reversal coefficient must be positive, got {eta}"
            )));
        }
        let out = (*self.nodes[x.0].value).clone();
        let rg = self.rg(x);
        Ok(self.push(out, Op::GradReverse { x, eta }, rg))
    }

    /// Mean negative log-softmax of the target class per row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = requires_2d("softmax_cross_entropy", tl)?;
        if targets.len() != n {
            return Err(TensorError::Shape {
                op: "softmax_cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0f32; n * v];
        let mut loss = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(TensorError::Index {
                    op: "softmax_cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let row = tl.row(i);
            loss += log_sum_exp(row) - row[t] as f64;
            softmax_row(row, &mut probs[i * v..(i + 1) * v]);
        }
        let loss = (loss / n.max(1) as f64) as f32;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean cross-entropy against per-row target distributions (`n×V`).
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = requires_2d("soft_cross_entropy", tl)?;
        if target.shape() != tl.shape() {
            return Err(TensorError::Shape {
                op: "soft_cross_entropy",
                left: tl.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let mut probs = vec![0.0f32; n * v];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = tl.row(i);
            let lse = log_sum_exp(row);
            for (j, &t) in target.row(i).iter().enumerate() {
                if t != 0.0 {
                    loss += t as f64 * (lse - row[j] as f64);
                }
            }
            softmax_row(row, &mut probs[i * v..(i + 1) * v]);
        }
        let loss = (loss / n.max(1) as f64) as f32;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                target: target.data().to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[f32]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[idx];
        let rg = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (p, q) = (ta.shape()[0], ta.shape()[1]);
                let r = tb.shape()[1];
                if rg(*a) {
                    accumulate(&mut grads[a.0], p * q, |buf| {
                        kernels::gemm_nt_acc(g, tb.data(), p, q, r, buf)
                    });
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], q * r, |buf| {
                        kernels::gemm_tn_acc(ta.data(), g, p, q, r, buf)
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        accumulate(&mut grads[v.0], g.len(), |buf| {
                            buf.iter_mut().zip(g).for_each(|(o, &x)| *o += x)
                        });
                    }
                }
            }
            Op::AddRow(x, row) => {
                if rg(*x) {
                    accumulate(&mut grads[x.0], g.len(), |buf| {
                        buf.iter_mut().zip(g).for_each(|(o, &v)| *o += v)
                    });
                }
                if rg(*row) {
                    let c = len(*row);
                    accumulate(&mut grads[row.0], c, |buf| {
                        for chunk in g.chunks(c) {
                            buf.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                if rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |buf| {
                        for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(tb.data()) {
                            *o += gv * bv;
                        }
                    });
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], g.len(), |buf| {
                        for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(ta.data()) {
                            *o += gv * av;
                        }
                    });
                }
            }
            Op::Scale(x, s) => {
                if rg(*x) {
                    accumulate(&mut grads[x.0], g.len(), |buf| {
                        buf.iter_mut().zip(g).for_each(|(o, &v)| *o += v * s)
                    });
                }
            }
            Op::Gelu { x, tanh } => {
                if rg(*x) {
                    let tx = &nodes[x.0].value;
                    accumulate(&mut grads[x.0], g.len(), |buf| {
                        for (((o, &gv), &xv), &t) in buf.iter_mut().zip(g).zip(tx.data()).zip(tanh) {
                            *o += gv * gelu_grad_from_tanh(xv, t);
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let c = len(*gamma);
                let n = inv_std.len();
                let tg = &nodes[gamma.0].value;
                if rg(*gamma) {
                    accumulate(&mut grads[gamma.0], c, |buf| {
                        for i in 0..n {
                            for j in 0..c {
                                buf[j] += g[i * c + j] * normed[i * c + j];
                            }
                        }
                    });
                }
                if rg(*beta) {
                    accumulate(&mut grads[beta.0], c, |buf| {
                        for chunk in g.chunks(c) {
                            buf.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
                        }
                    });
                }
                if rg(*x) {
                    accumulate(&mut grads[x.0], n * c, |buf| {
                        let mut dxh = vec![0.0f32; c];
                        for i in 0..n {
                            let mut mean_d = 0.0f32;
                            let mut mean_dx = 0.0f32;
                            for j in 0..c {
                                dxh[j] = g[i * c + j] * tg.data()[j];
                                mean_d += dxh[j];
                                mean_dx += dxh[j] * normed[i * c + j];
                            }
                            mean_d /= c as f32;
                            mean_dx /= c as f32;
                            for j in 0..c {
                                buf[i * c + j] += inv_std[i] * (dxh[j] - mean_d - normed[i * c + j] * mean_dx);
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if rg(*table) {
                    let d = nodes[table.0].value.cols();
                    accumulate(&mut grads[table.0], len(*table), |buf| {
                        for (i, &id) in ids.iter().enumerate() {
                            let dst = &mut buf[id * d..(id + 1) * d];
                            dst.iter_mut().zip(&g[i * d..(i + 1) * d]).for_each(|(o, &v)| *o += v);
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if rg(*x) {
                    let g0 = g[0];
                    accumulate(&mut grads[x.0], len(*x), |buf| buf.iter_mut().for_each(|o| *o += g0));
                }
            }
            Op::Mean(x) => {
                if rg(*x) {
                    let n = len(*x);
                    let g0 = g[0] / n as f32;
                    accumulate(&mut grads[x.0], n, |buf| buf.iter_mut().for_each(|o| *o += g0));
                }
            }
            Op::MeanRows(x) => {
                if rg(*x) {
                    let tx = &nodes[x.0].value;
                    let (n, c) = (tx.rows(), tx.cols());
                    let inv = 1.0 / n as f32;
                    accumulate(&mut grads[x.0], n * c, |buf| {
                        for chunk in buf.chunks_mut(c) {
                            chunk.iter_mut().zip(g).for_each(|(o, &v)| *o += v * inv);
                        }
                    });
                }
            }
            Op::SliceRows { x, start } => {
                if rg(*x) {
                    let c = nodes[x.0].value.cols();
                    let off = start * c;
                    accumulate(&mut grads[x.0], len(*x), |buf| {
                        buf[off..off + g.len()].iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                    });
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
                row_start,
                offsets,
            } => {
                let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let (n, d) = (tq.rows(), tq.cols());
                let total = offsets[n];
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let mut dq = vec![0.0f32; n * d];
                let mut dk = vec![0.0f32; n * d];
                let mut dv = vec![0.0f32; n * d];
                let mut dp = vec![0.0f32; n];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let s0 = row_start[i];
                        let w = i + 1 - s0;
                        let base = h * total + offsets[i];
                        let p = &probs[base..base + w];
                        let gi = &g[i * d + off..i * d + off + dh];
                        let mut dot = 0.0f32;
                        for jj in 0..w {
                            let j = s0 + jj;
                            let vj = &tv.row(j)[off..off + dh];
                            dp[jj] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dot += p[jj] * dp[jj];
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            dvj.iter_mut().zip(gi).for_each(|(o, &gv)| *o += p[jj] * gv);
                        }
                        for jj in 0..w {
                            let ds = p[jj] * (dp[jj] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let j = s0 + jj;
                            let kj = &tk.row(j)[off..off + dh];
                            let qi = &tq.row(i)[off..off + dh];
                            let dqi = &mut dq[i * d + off..i * d + off + dh];
                            dqi.iter_mut().zip(kj).for_each(|(o, &kv)| *o += ds * kv);
                            let dkj = &mut dk[j * d + off..j * d + off + dh];
                            dkj.iter_mut().zip(qi).for_each(|(o, &qv)| *o += ds * qv);
                        }
                    }
                }
                for (var, dbuf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if rg(var) {
                        accumulate(&mut grads[var.0], n * d, |buf| {
                            buf.iter_mut().zip(&dbuf).for_each(|(o, &x)| *o += x)
                        });
                    }
                }
            }
            Op::GradReverse { x, eta } => {
                if rg(*x) {
                    let neg = -eta;
                    accumulate(&mut grads[x.0], g.len(), |buf| {
                        buf.iter_mut().zip(g).for_each(|(o, &v)| *o += neg * v)
                    });
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if rg(*logits) {
                    let n = targets.len();
                    let v = probs.len() / n.max(1);
                    let s = g[0] / n as f32;
                    accumulate(&mut grads[logits.0], probs.len(), |buf| {
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..v {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                buf[i * v + j] += s * (probs[i * v + j] - onehot);
                            }
                        }
                    });
                }
            }
            Op::SoftCrossEntropy { logits, target, probs } => {
                if rg(*logits) {
                    let tl = &nodes[logits.0].value;
                    let (n, v) = (tl.rows(), tl.cols());
                    let s = g[0] / n as f32;
                    accumulate(&mut grads[logits.0], probs.len(), |buf| {
                        for i in 0..n {
                            let mass: f32 = target[i * v..(i + 1) * v].iter().sum();
                            for j in 0..v {
                                buf[i * v + j] += s * (mass * probs[i * v + j] - target[i * v + j]);
                            }
                        }
                    });
                }
            }
        }
    }
}
