//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Nodes are
//! appended in evaluation order, so the arena order is already a topological
//! order and [`Graph::backward`] walks it once in reverse, summing the
//! contributions of every consumer into each node's gradient.
//!
//! Broadcasting is limited to scalar-vs-tensor (`mul_scalar`, `add_scalar`)
//! and per-row scalars over the leading dimensions (`mul_rows`).

use std::ops::Range;
use std::sync::Arc;

use super::tensor::{axpy, dot, gemm_strided, Tensor};
use crate::error::{Error, Result};

/// Floor on the L2 norm used as divisor.
pub const NORM_EPS: f64 = 1e-12;
/// Variance floor inside RMS normalization.
pub const RMS_EPS: f64 = 1e-6;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Abs(Var),
    Silu(Var),
    Scale(Var, f64),
    Offset(Var),
    Clamp(Var, f64, f64),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    MulRows(Var, Var),
    Sum(Var),
    SumSqLast(Var),
    L2NormalizeLast(Var, Vec<f64>),
    MaskedSoftmax(Var, Arc<Vec<bool>>),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Reshape(Var),
    Slice { src: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, scale: f64, probs: Vec<f64> },
    LeakyScan { input: Var, gate: Var, decay: Var, resets: Arc<Vec<bool>> },
    SpanAttention(Box<SpanAttention>),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Rope { x: Var, cos: Arc<Vec<f64>>, sin: Arc<Vec<f64>> },
}

#[derive(Debug)]
struct SpanAttention {
    query: Var,
    key: Var,
    value: Var,
    scale: Var,
    spans: Arc<Vec<Range<usize>>>,
    /// Softmax weights, row `t` stored at `offsets[t]..offsets[t] + spans[t].len()`.
    weights: Vec<f64>,
    offsets: Vec<usize>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Attention weights recorded by [`Graph::span_attention`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionView<'a> {
    pub spans: &'a [Range<usize>],
    weights: &'a [f64],
    offsets: &'a [usize],
}

impl<'a> AttentionView<'a> {
    /// Weights of query row `t`, aligned with `spans[t]`.
    pub fn row(&self, t: usize) -> &'a [f64] {
        let start = self.offsets[t];
        &self.weights[start..start + self.spans[t].len()]
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Rotary angle tables for `positions`, dimension `dim` (even), frequency base `base`.
pub fn rope_tables(positions: &[usize], dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / dim as f64);
            let angle = p as f64 * freq;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn attention(&self, v: Var) -> Option<AttentionView<'_>> {
        match &self.nodes[v.0].op {
            Op::SpanAttention(sa) => Some(AttentionView {
                spans: &sa.spans,
                weights: &sa.weights,
                offsets: &sa.offsets,
            }),
            _ => None,
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `x·sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    /// Elementwise clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    fn check_scalar(&self, s: Var, op: &str) -> Result<()> {
        if self.value(s).len() != 1 {
            return shape_err(format!("{op}: expected scalar, got {:?}", self.shape(s)));
        }
        Ok(())
    }

    /// Multiplies every element by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check_scalar(s, "mul_scalar")?;
        let c = self.value(s).item();
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check_scalar(s, "add_scalar")?;
        let c = self.value(s).item();
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::AddScalar(a, s), rg))
    }

    /// Scales each last-axis row of `a` by the matching entry of `s`
    /// (`s.len()` equals the product of the leading dimensions of `a`).
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.len() != ta.leading() {
            return shape_err(format!("mul_rows: {:?} by {:?}", ta.shape(), ts.shape()));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for (row, &k) in data.chunks_mut(c).zip(ts.data()) {
            row.iter_mut().for_each(|x| *x *= k);
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::MulRows(a, s), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// Squared L2 norm along the last axis; drops that axis.
    pub fn sum_sq_last(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().chunks(ta.cols()).map(|r| dot(r, r)).collect();
        let shape = if ta.rank() > 1 {
            ta.shape()[..ta.rank() - 1].to_vec()
        } else {
            vec![1]
        };
        let out = Tensor::from_parts(shape, data);
        let rg = self.rg(&[a]);
        self.push(out, Op::SumSqLast(a), rg)
    }

    /// `x / max(‖x‖, 1e-12)` along the last axis.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut norms = Vec::with_capacity(ta.leading());
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let n = dot(row, row).sqrt();
            norms.push(n);
            let inv = 1.0 / n.max(NORM_EPS);
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(out, Op::L2NormalizeLast(a, norms), rg)
    }

    /// Softmax along the last axis over positions where `mask` is true.
    /// Masked entries get exactly zero; a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return shape_err(format!("masked_softmax: mask {} for {:?}", mask.len(), ta.shape()));
        }
        let c = ta.cols();
        let mut data = vec![0.0; ta.len()];
        for ((row, m), out) in ta.data().chunks(c).zip(mask.chunks(c)).zip(data.chunks_mut(c)) {
            softmax_masked_row(row, m, out);
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MaskedSoftmax(a, mask), rg))
    }

    /// `a·b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return shape_err(format!("matmul: {:?} · {:?}", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm_strided(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() {
            return shape_err(format!("matmul_nt: {:?} · {:?}ᵀ", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        gemm_strided(m, k, n, ta.data(), (k, 1), tb.data(), (1, k), &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() || len == 0 || start + len > ta.shape()[axis] {
            return shape_err(format!("slice axis {axis} [{start}, +{len}) of {:?}", ta.shape()));
        }
        let (outer, n, inner) = split_axis(ta.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { src: a, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of nothing");
        };
        let base_shape = self.shape(first).to_vec();
        if axis >= base_shape.len() {
            return shape_err(format!("concat axis {axis} of {base_shape:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return shape_err(format!("concat: {s:?} vs {base_shape:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let n = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Row lookup into a `V×d` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        if tt.rank() != 2 || ids.is_empty() {
            return shape_err(format!("gather from {:?}", tt.shape()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("index {bad} out of range for table of {v} rows")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ_t −log softmax(logits_t)[target_t] / normalizer`, skipping `None` targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], normalizer: f64) -> Result<Var> {
        let tl = self.value(logits);
        let (r, c) = (tl.rows(), tl.cols());
        if tl.rank() != 2 || targets.len() != r {
            return shape_err(format!("cross_entropy: {:?} with {} targets", tl.shape(), targets.len()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::Input(format!("target {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for (t, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            let row = tl.row(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let out = &mut probs[t * c..(t + 1) * c];
            for (p, x) in out.iter_mut().zip(row) {
                *p = (x - max).exp() / z;
            }
            total += z.ln() + max - row[target];
        }
        let scale = 1.0 / normalizer;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
                probs,
            },
            rg,
        ))
    }

    /// Input-dependent leaky accumulation over rows:
    /// `out_t = gate_t·input_t + decay_t·out_{t−1}`, with `out_{−1} = 0` and the
    /// carried state dropped wherever `resets[t]` is set.
    pub fn leaky_scan(&mut self, input: Var, gate: Var, decay: Var, resets: Arc<Vec<bool>>) -> Result<Var> {
        let (tx, tg, td) = (self.value(input), self.value(gate), self.value(decay));
        let (l, d) = (tx.rows(), tx.cols());
        if tx.rank() != 2 || tg.len() != l || td.len() != l || resets.len() != l {
            return shape_err(format!(
                "leaky_scan: input {:?}, gate {:?}, decay {:?}, resets {}",
                tx.shape(),
                tg.shape(),
                td.shape(),
                resets.len()
            ));
        }
        let mut out = vec![0.0; l * d];
        for t in 0..l {
            let (prev, cur) = out.split_at_mut(t * d);
            let cur = &mut cur[..d];
            let g = tg.data()[t];
            for (o, x) in cur.iter_mut().zip(tx.row(t)) {
                *o = g * x;
            }
            if t > 0 && !resets[t] {
                axpy(td.data()[t], &prev[(t - 1) * d..], cur);
            }
        }
        let rg = self.rg(&[input, gate, decay]);
        Ok(self.push(
            Tensor::from_parts(vec![l, d], out),
            Op::LeakyScan {
                input,
                gate,
                decay,
                resets,
            },
            rg,
        ))
    }

    /// Row-wise kernel retrieval restricted to contiguous spans of stored pairs:
    /// `out_t = Σ_{j∈spans[t]} softmax_j(scale_t·q_tᵀk_j)·v_j`, zero for empty spans.
    /// Equivalent to `matmul_nt` + `mul_rows` + `masked_softmax` + `matmul`
    /// with a span-shaped mask, without materializing the full score matrix.
    pub fn span_attention(
        &mut self,
        query: Var,
        key: Var,
        value: Var,
        scale: Var,
        spans: Arc<Vec<Range<usize>>>,
    ) -> Result<Var> {
        let (tq, tk, tv, ts) = (self.value(query), self.value(key), self.value(value), self.value(scale));
        let (l, d) = (tq.rows(), tq.cols());
        let (n, dv) = (tk.rows(), tv.cols());
        if tq.rank() != 2
            || tk.cols() != d
            || tv.rows() != n
            || ts.len() != l
            || spans.len() != l
            || spans.iter().any(|s| s.end > n)
        {
            return shape_err(format!(
                "span_attention: q {:?}, k {:?}, v {:?}, scale {:?}, {} spans",
                tq.shape(),
                tk.shape(),
                tv.shape(),
                ts.shape(),
                spans.len()
            ));
        }
        let mut offsets = Vec::with_capacity(l);
        let mut total = 0;
        for s in spans.iter() {
            offsets.push(total);
            total += s.len();
        }
        let mut weights = vec![0.0; total];
        let mut out = vec![0.0; l * dv];
        for t in 0..l {
            let span = spans[t].clone();
            if span.is_empty() {
                continue;
            }
            let w = &mut weights[offsets[t]..offsets[t] + span.len()];
            let q = tq.row(t);
            let beta = ts.data()[t];
            let mut max = f64::NEG_INFINITY;
            for (wj, j) in w.iter_mut().zip(span.clone()) {
                *wj = beta * dot(q, tk.row(j));
                max = max.max(*wj);
            }
            let mut z = 0.0;
            for wj in w.iter_mut() {
                *wj = (*wj - max).exp();
                z += *wj;
            }
            let o = &mut out[t * dv..(t + 1) * dv];
            for (wj, j) in w.iter_mut().zip(span) {
                *wj /= z;
                axpy(*wj, tv.row(j), o);
            }
        }
        let rg = self.rg(&[query, key, value, scale]);
        Ok(self.push(
            Tensor::from_parts(vec![l, dv], out),
            Op::SpanAttention(Box::new(SpanAttention {
                query,
                key,
                value,
                scale,
                spans,
                weights,
                offsets,
            })),
            rg,
        ))
    }

    /// `x / sqrt(mean(x²) + 1e-6) ⊙ gain` along the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let c = tx.cols();
        if tg.len() != c {
            return shape_err(format!("rms_norm: {:?} with gain {:?}", tx.shape(), tg.shape()));
        }
        let mut inv_rms = Vec::with_capacity(tx.leading());
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            let r = 1.0 / (dot(row, row) / c as f64 + RMS_EPS).sqrt();
            inv_rms.push(r);
            for (v, g) in row.iter_mut().zip(tg.data()) {
                *v *= r * g;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(&[x, gain]);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Rotates consecutive feature pairs `(2i, 2i+1)` of each row by the angles
    /// tabulated in `cos`/`sin` (`rows × dim/2`, see [`rope_tables`]).
    pub fn rope(&mut self, x: Var, cos: Arc<Vec<f64>>, sin: Arc<Vec<f64>>) -> Result<Var> {
        let tx = self.value(x);
        let (l, d) = (tx.rows(), tx.cols());
        if d % 2 != 0 || cos.len() != l * d / 2 || sin.len() != cos.len() {
            return shape_err(format!("rope: {:?} with {} angles", tx.shape(), cos.len()));
        }
        let data = rotate(tx.data(), d, &cos, &sin, 1.0);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![l, d], data), Op::Rope { x, cos, sin }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !rg(v) {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| axpy(1.0, gy, g));
                acc(*b, &mut |g| axpy(1.0, gy, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| axpy(1.0, gy, g));
                acc(*b, &mut |g| axpy(-1.0, gy, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| g.iter_mut().zip(gy).zip(vb).for_each(|((g, d), y)| *g += d * y));
                acc(*b, &mut |g| g.iter_mut().zip(gy).zip(va).for_each(|((g, d), x)| *g += d * x));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| g.iter_mut().zip(gy).zip(vb).for_each(|((g, d), y)| *g += d / y));
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] -= gy[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::Neg(a) => acc(*a, &mut |g| axpy(-1.0, gy, g)),
            Op::Exp(a) => acc(*a, &mut |g| g.iter_mut().zip(gy).zip(y).for_each(|((g, d), y)| *g += d * y)),
            Op::Abs(a) => {
                let va = val(*a);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        let s = if va[i] > 0.0 {
                            1.0
                        } else if va[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[i] += gy[i] * s;
                    }
                });
            }
            Op::Silu(a) => {
                let va = val(*a);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        let s = sigmoid(va[i]);
                        g[i] += gy[i] * s * (1.0 + va[i] * (1.0 - s));
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |g| axpy(*c, gy, g)),
            Op::Offset(a) | Op::Reshape(a) => acc(*a, &mut |g| axpy(1.0, gy, g)),
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if va[i] >= *lo && va[i] <= *hi {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let c = val(*s)[0];
                let va = val(*a);
                acc(*a, &mut |g| axpy(c, gy, g));
                acc(*s, &mut |g| g[0] += dot(gy, va));
            }
            Op::AddScalar(a, s) => {
                acc(*a, &mut |g| axpy(1.0, gy, g));
                acc(*s, &mut |g| g[0] += gy.iter().sum::<f64>());
            }
            Op::MulRows(a, s) => {
                let (va, vs) = (val(*a), val(*s));
                let c = node.value.cols();
                acc(*a, &mut |g| {
                    for ((gr, dr), k) in g.chunks_mut(c).zip(gy.chunks(c)).zip(vs) {
                        axpy(*k, dr, gr);
                    }
                });
                acc(*s, &mut |g| {
                    for ((gi, dr), ar) in g.iter_mut().zip(gy.chunks(c)).zip(va.chunks(c)) {
                        *gi += dot(dr, ar);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += gy[0])),
            Op::SumSqLast(a) => {
                let va = val(*a);
                let c = self.nodes[a.0].value.cols();
                acc(*a, &mut |g| {
                    for ((gr, xr), d) in g.chunks_mut(c).zip(va.chunks(c)).zip(gy) {
                        axpy(2.0 * d, xr, gr);
                    }
                });
            }
            Op::L2NormalizeLast(a, norms) => {
                let va = val(*a);
                let c = node.value.cols();
                acc(*a, &mut |g| {
                    for r in 0..norms.len() {
                        let n = norms[r];
                        let (xr, dr) = (&va[r * c..(r + 1) * c], &gy[r * c..(r + 1) * c]);
                        let gr = &mut g[r * c..(r + 1) * c];
                        if n > NORM_EPS {
                            axpy(1.0 / n, dr, gr);
                            axpy(-dot(dr, xr) / (n * n * n), xr, gr);
                        } else {
                            axpy(1.0 / NORM_EPS, dr, gr);
                        }
                    }
                });
            }
            Op::MaskedSoftmax(a, mask) => {
                let c = node.value.cols();
                acc(*a, &mut |g| {
                    for ((gr, (yr, dr)), mr) in g.chunks_mut(c).zip(y.chunks(c).zip(gy.chunks(c))).zip(mask.chunks(c)) {
                        let s = dot(yr, dr);
                        for j in 0..c {
                            if mr[j] {
                                gr[j] += yr[j] * (dr[j] - s);
                            }
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                acc(*a, &mut |g| gemm_strided(m, n, k, gy, (n, 1), tb.data(), (1, n), g, true));
                acc(*b, &mut |g| gemm_strided(k, m, n, ta.data(), (1, k), gy, (n, 1), g, true));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                acc(*a, &mut |g| gemm_strided(m, n, k, gy, (n, 1), tb.data(), (k, 1), g, true));
                acc(*b, &mut |g| gemm_strided(n, m, k, gy, (1, n), ta.data(), (k, 1), g, true));
            }
            Op::Slice { src, axis, start } => {
                let src_shape = self.nodes[src.0].value.shape();
                let (outer, n, inner) = split_axis(src_shape, *axis);
                let len = node.value.shape()[*axis];
                acc(*src, &mut |g| {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        axpy(1.0, &gy[o * len * inner..(o + 1) * len * inner], &mut g[base..base + len * inner]);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.shape()[*axis];
                    acc(p, &mut |g| {
                        for o in 0..outer {
                            let src = o * total * inner + off * inner;
                            axpy(1.0, &gy[src..src + n * inner], &mut g[o * n * inner..(o + 1) * n * inner]);
                        }
                    });
                    off += n;
                }
            }
            Op::Gather { table, ids } => {
                let d = node.value.cols();
                acc(*table, &mut |g| {
                    for (r, &i) in ids.iter().enumerate() {
                        axpy(1.0, &gy[r * d..(r + 1) * d], &mut g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                scale,
                probs,
            } => {
                let c = self.nodes[logits.0].value.cols();
                let k = gy[0] * scale;
                acc(*logits, &mut |g| {
                    for (t, target) in targets.iter().enumerate() {
                        let Some(target) = *target else { continue };
                        let gr = &mut g[t * c..(t + 1) * c];
                        axpy(k, &probs[t * c..(t + 1) * c], gr);
                        gr[target] -= k;
                    }
                });
            }
            Op::LeakyScan {
                input,
                gate,
                decay,
                resets,
            } => {
                let (vx, vg, vd) = (val(*input), val(*gate), val(*decay));
                let d = node.value.cols();
                let l = resets.len();
                // total_t = dL/dout_t including the carry from t+1
                let mut total = gy.to_vec();
                for t in (1..l).rev() {
                    if !resets[t] {
                        let (head, tail) = total.split_at_mut(t * d);
                        axpy(vd[t], &tail[..d], &mut head[(t - 1) * d..]);
                    }
                }
                acc(*input, &mut |g| {
                    for t in 0..l {
                        axpy(vg[t], &total[t * d..(t + 1) * d], &mut g[t * d..(t + 1) * d]);
                    }
                });
                acc(*gate, &mut |g| {
                    for t in 0..l {
                        g[t] += dot(&total[t * d..(t + 1) * d], &vx[t * d..(t + 1) * d]);
                    }
                });
                acc(*decay, &mut |g| {
                    for t in 1..l {
                        if !resets[t] {
                            g[t] += dot(&total[t * d..(t + 1) * d], &y[(t - 1) * d..t * d]);
                        }
                    }
                });
            }
            Op::SpanAttention(sa) => self.span_attention_backward(sa, gy, &mut acc),
            Op::RmsNorm { x, gain, inv_rms } => {
                let (vx, vg) = (val(*x), val(*gain));
                let c = vg.len();
                acc(*gain, &mut |g| {
                    for ((xr, dr), r) in vx.chunks(c).zip(gy.chunks(c)).zip(inv_rms) {
                        for j in 0..c {
                            g[j] += dr[j] * xr[j] * r;
                        }
                    }
                });
                acc(*x, &mut |g| {
                    for (((gr, xr), dr), r) in g.chunks_mut(c).zip(vx.chunks(c)).zip(gy.chunks(c)).zip(inv_rms) {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += dr[j] * vg[j] * xr[j];
                        }
                        let k = r * r * r * s / c as f64;
                        for j in 0..c {
                            gr[j] += r * vg[j] * dr[j] - k * xr[j];
                        }
                    }
                });
            }
            Op::Rope { x, cos, sin } => {
                let d = node.value.cols();
                acc(*x, &mut |g| {
                    let back = rotate(gy, d, cos, sin, -1.0);
                    axpy(1.0, &back, g);
                });
            }
        }
    }

    fn span_attention_backward(
        &self,
        sa: &SpanAttention,
        gy: &[f64],
        acc: &mut impl FnMut(Var, &mut dyn FnMut(&mut [f64])),
    ) {
        let (tq, tk, tv) = (
            &self.nodes[sa.query.0].value,
            &self.nodes[sa.key.0].value,
            &self.nodes[sa.value.0].value,
        );
        let ts = self.nodes[sa.scale.0].value.data();
        let (l, d, dv) = (tq.rows(), tq.cols(), tv.cols());
        let n = tk.rows();
        let mut dq = vec![0.0; l * d];
        let mut dk = vec![0.0; n * d];
        let mut dvv = vec![0.0; n * dv];
        let mut dscale = vec![0.0; l];
        let mut ds_buf = Vec::new();
        for t in 0..l {
            let span = sa.spans[t].clone();
            if span.is_empty() {
                continue;
            }
            let w = &sa.weights[sa.offsets[t]..sa.offsets[t] + span.len()];
            let go = &gy[t * dv..(t + 1) * dv];
            let q = tq.row(t);
            ds_buf.clear();
            let mut s = 0.0;
            for (wj, j) in w.iter().zip(span.clone()) {
                let dp = dot(go, tv.row(j));
                axpy(*wj, go, &mut dvv[j * dv..(j + 1) * dv]);
                ds_buf.push(dp);
                s += wj * dp;
            }
            let beta = ts[t];
            for ((dsj, wj), j) in ds_buf.iter_mut().zip(w).zip(span) {
                *dsj = wj * (*dsj - s);
                let kj = tk.row(j);
                dscale[t] += *dsj * dot(q, kj);
                axpy(beta * *dsj, kj, &mut dq[t * d..(t + 1) * d]);
                axpy(beta * *dsj, q, &mut dk[j * d..(j + 1) * d]);
            }
        }
        acc(sa.query, &mut |g| axpy(1.0, &dq, g));
        acc(sa.key, &mut |g| axpy(1.0, &dk, g));
        acc(sa.value, &mut |g| axpy(1.0, &dvv, g));
        acc(sa.scale, &mut |g| axpy(1.0, &dscale, g));
    }
}

fn rotate(x: &[f64], d: usize, cos: &[f64], sin: &[f64], dir: f64) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; x.len()];
    for (r, (xr, or)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        for i in 0..half {
            let (c, s) = (cos[r * half + i], dir * sin[r * half + i]);
            let (a, b) = (xr[2 * i], xr[2 * i + 1]);
            or[2 * i] = a * c - b * s;
            or[2 * i + 1] = a * s + b * c;
        }
    }
    out
}

/// Softmax of `row` restricted to `mask`; writes zeros if nothing is visible.
pub fn softmax_masked_row(row: &[f64], mask: &[bool], out: &mut [f64]) {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return;
    }
    let mut z = 0.0;
    for ((o, x), &m) in out.iter_mut().zip(row).zip(mask) {
        *o = if m { (x - max).exp() } else { 0.0 };
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}
