//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are appended to a [`Tape`] in execution order, so the node list
//! is topologically sorted by construction. [`Tape::backward`] walks it once
//! in reverse. Ops are deliberately coarse (a fused multi-head causal attention,
//! a fused masked cross-entropy) so that the per-node overhead is negligible
//! next to the arithmetic.

use std::sync::Arc;

use rand::Rng;

use crate::error::{NumericsError, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::{axis_split, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows holding one sequence inside a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(T, T)>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Attention {
        qkv: Var,
        segments: Arc<[Segment]>,
        n_heads: usize,
        probs: Vec<T>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Gelu(a) | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Softmax { x, .. } | Op::Dropout { x, .. } => vec![*x],
            Op::Attention { qkv, .. } => vec![*qkv],
            Op::GatherRows { table, .. } => vec![*table],
            Op::ConcatRows(parts) => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation; values are kept for the backward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), rg, "scale")
    }

    /// Adds a length-`d` bias to every row of an `[n×d]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let (_, d) = vx.dims2()?;
        if vb.shape() != [d] {
            return Err(mismatch("add_bias", &[d], vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (r, &b) in row.iter_mut().zip(vb.data()) {
                *r += b;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        self.push(out, Op::AddBias(x, bias), rg, "add_bias")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(mismatch("matmul", &[k, n], &[k2, n]));
        }
        let mut data = vec![T::zero(); m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut data, m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg, "gelu")
    }

    /// Row-wise layer normalization of an `[n×d]` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, d) = vx.dims2()?;
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(mismatch("layer_norm", &[d], vg.shape()));
        }
        let mut data = vec![T::zero(); n * d];
        let mut stats = Vec::with_capacity(n);
        kernels::layer_norm_rows(vx.data(), vg.data(), vb.data(), eps, &mut data, Some(&mut stats));
        let out = Tensor::new(vec![n, d], data)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
            "layer_norm",
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Softmax { x, axis }, rg, "softmax")
    }

    /// Fused multi-head causal self-attention over a packed batch.
    ///
    /// `qkv` is `[n × 3d]` with each row laid out as `[q | k | v]`; heads
    /// split `d` into equal contiguous chunks. Attention never crosses a
    /// segment boundary and row `t` only sees rows `≤ t` of its segment.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        segments: Arc<[Segment]>,
        n_heads: usize,
    ) -> Result<Var> {
        let vq = self.value(qkv);
        let (n, three_d) = vq.dims2()?;
        if three_d % 3 != 0 || (three_d / 3) % n_heads != 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "attention width {three_d} incompatible with {n_heads} heads"
            )));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if segments.iter().any(|s| s.start + s.len > n) || covered != n {
            return Err(NumericsError::InvalidArgument(
                "attention segments must tile the packed rows".into(),
            ));
        }
        let d = three_d / 3;
        let hd = d / n_heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let src = vq.data();
        let mut out = vec![T::zero(); n * d];
        let tri_total: usize = segments.iter().map(|s| s.len * (s.len + 1) / 2).sum();
        let mut probs = vec![T::zero(); tri_total * n_heads];
        let mut off = 0;
        for seg in segments.iter() {
            let tri = seg.len * (seg.len + 1) / 2;
            for h in 0..n_heads {
                let pbase = off + h * tri;
                for t in 0..seg.len {
                    let qrow = (seg.start + t) * three_d + h * hd;
                    let q = &src[qrow..qrow + hd];
                    let prow = &mut probs[pbase + t * (t + 1) / 2..pbase + t * (t + 1) / 2 + t + 1];
                    for (s, p) in prow.iter_mut().enumerate() {
                        let krow = (seg.start + s) * three_d + d + h * hd;
                        *p = kernels::dot(q, &src[krow..krow + hd]) * scale;
                    }
                    kernels::softmax_in_place(prow);
                    let orow = (seg.start + t) * d + h * hd;
                    let o = &mut out[orow..orow + hd];
                    for (s, &p) in prow.iter().enumerate() {
                        let vrow = (seg.start + s) * three_d + 2 * d + h * hd;
                        kernels::axpy(p, &src[vrow..vrow + hd], o);
                    }
                }
            }
            off += tri * n_heads;
        }
        let out = Tensor::new(vec![n, d], out)?;
        let rg = self.any_grad(&[qkv]);
        self.push(
            out,
            Op::Attention {
                qkv,
                segments,
                n_heads,
                probs,
            },
            rg,
            "causal_attention",
        )
    }

    /// Selects rows of an `[r×d]` table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (r, d) = vt.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= r {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    size: r,
                });
            }
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.any_grad(&[table]);
        self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    /// Stacks `[rᵢ×d]` matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument("concat_rows of nothing".into()));
        }
        let (_, d) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, dp) = self.value(p).dims2()?;
            if dp != d {
                return Err(mismatch("concat_rows", &[r, d], &[r, dp]));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        let rg = self.any_grad(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits`, over the positions selected by `mask`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let vl = self.value(logits);
        let (t, v) = vl.dims2()?;
        if targets.len() != t || mask.len() != t {
            return Err(mismatch("cross_entropy", &[t], &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(NumericsError::EmptyMask);
        }
        let mut probs = vec![T::zero(); t * v];
        let mut loss = T::zero();
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let y = targets[i];
            if y >= v {
                return Err(NumericsError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: y,
                    size: v,
                });
            }
            let row = vl.row(i);
            let p = &mut probs[i * v..(i + 1) * v];
            p.copy_from_slice(row);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            loss += lse - row[y];
            kernels::softmax_in_place(p);
        }
        let out = Tensor::scalar(loss / T::lit(count as f64));
        let rg = self.any_grad(&[logits]);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. `p == 0` records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::InvalidArgument(format!("dropout rate {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let vx = self.value(x);
        let mask: Vec<T> = (0..vx.len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Dropout { x, mask }, rg, "dropout")
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Each node is visited exactly once, in reverse recording order.
    /// Gradients fan in additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NotScalar(lv.shape().to_vec()));
        }
        lv.ensure_finite("backward")?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.op.inputs().iter().any(|inp| inp.0 >= i) {
                return Err(NumericsError::GraphCycle { node: i });
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(acc) = self.slot(grads, *v) {
                        acc.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(acc) = self.slot(grads, *a) {
                    for j in 0..acc.len() {
                        acc[j] += g[j] * vb[j];
                    }
                }
                if let Some(acc) = self.slot(grads, *b) {
                    for j in 0..acc.len() {
                        acc[j] += g[j] * va[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(acc) = self.slot(grads, *a) {
                    kernels::axpy(*c, g, acc);
                }
            }
            Op::AddBias(x, b) => {
                let d = self.value(*b).len();
                if let Some(acc) = self.slot(grads, *x) {
                    acc.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(acc) = self.slot(grads, *b) {
                    for row in g.chunks_exact(d) {
                        acc.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if let Some(acc) = self.slot(grads, *a) {
                    kernels::matmul_a_bt_acc(g, vb, acc, m, k, n);
                }
                if let Some(acc) = self.slot(grads, *b) {
                    kernels::matmul_at_b_acc(va, g, acc, m, k, n);
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                if let Some(acc) = self.slot(grads, *x) {
                    for j in 0..acc.len() {
                        acc[j] += g[j] * kernels::gelu_grad(vx[j]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let vx = self.value(*x).data();
                let vg = self.value(*gamma).data();
                let d = vg.len();
                let inv_d = T::one() / T::lit(d as f64);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); vx.len()];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &vx[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * vg[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    let dr = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        dr[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                for (v, upd) in [(x, dx), (gamma, dgamma), (beta, dbeta)] {
                    if let Some(acc) = self.slot(grads, *v) {
                        acc.iter_mut().zip(&upd).for_each(|(a, &u)| *a += u);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                if let Some(acc) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for j in 0..len {
                                let ix = base + j * inner;
                                dot += y[ix] * g[ix];
                            }
                            for j in 0..len {
                                let ix = base + j * inner;
                                acc[ix] += y[ix] * (g[ix] - dot);
                            }
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                segments,
                n_heads,
                probs,
            } => {
                let src = self.value(*qkv).data();
                let (_, three_d) = self.value(*qkv).dims2()?;
                let d = three_d / 3;
                let hd = d / n_heads;
                let scale = T::one() / T::lit(hd as f64).sqrt();
                let Some(acc) = self.slot(grads, *qkv) else {
                    return Ok(());
                };
                let mut dp = Vec::new();
                let mut off = 0;
                for seg in segments.iter() {
                    let tri = seg.len * (seg.len + 1) / 2;
                    for h in 0..*n_heads {
                        let pbase = off + h * tri;
                        for t in 0..seg.len {
                            let prow = &probs[pbase + t * (t + 1) / 2..pbase + t * (t + 1) / 2 + t + 1];
                            let grow = (seg.start + t) * d + h * hd;
                            let go = &g[grow..grow + hd];
                            dp.clear();
                            let mut wsum = T::zero();
                            for (s, &p) in prow.iter().enumerate() {
                                let vrow = (seg.start + s) * three_d + 2 * d + h * hd;
                                let dps = kernels::dot(go, &src[vrow..vrow + hd]);
                                dp.push(dps);
                                wsum += p * dps;
                                kernels::axpy(p, go, &mut acc[vrow..vrow + hd]);
                            }
                            let qrow = (seg.start + t) * three_d + h * hd;
                            for (s, &p) in prow.iter().enumerate() {
                                let ds = p * (dp[s] - wsum) * scale;
                                if ds.abs() < T::min_positive_value() {
                                    continue;
                                }
                                let krow = (seg.start + s) * three_d + d + h * hd;
                                for j in 0..hd {
                                    let kv = src[krow + j];
                                    let qv = src[qrow + j];
                                    acc[qrow + j] += ds * kv;
                                    acc[krow + j] += ds * qv;
                                }
                            }
                        }
                    }
                    off += tri * n_heads;
                }
            }
            Op::GatherRows { table, ids } => {
                let d = self.value(*table).dims2()?.1;
                if let Some(acc) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(T::one(), &g[r * d..(r + 1) * d], &mut acc[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(acc) = self.slot(grads, *p) {
                        acc.iter_mut().zip(&g[off..off + n]).for_each(|(a, &u)| *a += u);
                    }
                    off += n;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.value(*logits).dims2()?.1;
                let w = g[0] / T::lit(*count as f64);
                if let Some(acc) = self.slot(grads, *logits) {
                    for (i, (&y, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let p = &probs[i * v..(i + 1) * v];
                        let a = &mut acc[i * v..(i + 1) * v];
                        kernels::axpy(w, p, a);
                        a[y] -= w;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(acc) = self.slot(grads, *x) {
                    acc.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(acc) = self.slot(grads, *x) {
                    for j in 0..acc.len() {
                        acc[j] += g[j] * mask[j];
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not require a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// participate in the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(vec![0.5, -2.0, 3.0])).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient_is_twice_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_participating_parameter_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let unused = tape.param(Tensor::from_vec(vec![7.0; 4])).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(NumericsError::NotScalar(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let mut tape = Tape::<f64>::new();
        let l = tape.param(Tensor::zeros(&[3, 30])).unwrap();
        let loss = tape.cross_entropy(l, &[0, 5, 29], &[true, true, true]).unwrap();
        assert!((tape.value(loss).data()[0] - 30f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_target_is_near_zero() {
        let mut tape = Tape::<f64>::new();
        let mut logits = Tensor::zeros(&[1, 5]);
        logits.data_mut()[2] = 60.0;
        let l = tape.param(logits).unwrap();
        let loss = tape.cross_entropy(l, &[2], &[true]).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-20);
    }

    #[test]
    fn cross_entropy_requires_a_mask_bit() {
        let mut tape = Tape::<f64>::new();
        let l = tape.param(Tensor::zeros(&[2, 4])).unwrap();
        assert_eq!(
            tape.cross_entropy(l, &[0, 1], &[false, false]).err(),
            Some(NumericsError::EmptyMask)
        );
    }

    #[test]
    fn cross_entropy_matches_brute_force_log_softmax() {
        // T=4, V=8 with pseudo-random logits; oracle computes log-softmax via
        // an explicit sum over the vocabulary without max-shifting.
        let (t, v) = (4, 8);
        let logits: Vec<f64> = (0..t * v)
            .map(|i| ((i * 37 + 11) % 17) as f64 * 0.37 - 2.9)
            .collect();
        let targets = [3, 0, 7, 5];
        let mask = [true, false, true, true];
        let mut expected = 0.0;
        let mut cnt = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let row = &logits[i * v..(i + 1) * v];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            expected -= (row[targets[i]].exp() / z).ln();
            cnt += 1.0;
        }
        expected /= cnt;
        let mut tape = Tape::<f64>::new();
        let l = tape.param(Tensor::new(vec![t, v], logits).unwrap()).unwrap();
        let loss = tape.cross_entropy(l, &targets, &mask).unwrap();
        assert!((tape.value(loss).data()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut tape = Tape::<f32>::new();
        assert!(matches!(
            tape.param(Tensor::from_vec(vec![f32::INFINITY])),
            Err(NumericsError::NonFinite { .. })
        ));
        let x = tape.param(Tensor::from_vec(vec![3e38])).unwrap();
        assert!(tape.add(x, x).is_err());
    }

    #[test]
    fn attention_rejects_segments_that_do_not_tile() {
        let mut tape = Tape::<f64>::new();
        let q = tape.param(Tensor::zeros(&[3, 6])).unwrap();
        let segs: Arc<[Segment]> = vec![Segment { start: 0, len: 2 }].into();
        assert!(tape.causal_attention(q, segs, 1).is_err());
    }

    #[test]
    fn self_reference_is_reported_as_cycle() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(vec![1.0])).unwrap();
        let s = tape.sum(x).unwrap();
        tape.nodes[s.0].op = Op::Sum(s);
        assert_eq!(
            tape.backward(s).err(),
            Some(NumericsError::GraphCycle { node: s.0 })
        );
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x + x + x) → grad 3
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, -1.0])).unwrap();
        let a = tape.add(x, x).unwrap();
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[3.0, 3.0]);
    }
}
