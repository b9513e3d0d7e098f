//! Tape-based reverse-mode autodiff.
//!
//! Every op appends a node holding its output value. `backward` walks the
//! tape in reverse once, accumulating gradients in fixed order, and leaves
//! the gradient of every `requires_grad` leaf readable through [`Tape::grad`].
//! A tape is single-use: call [`Tape::reset`] (or build a new one) before the
//! next forward pass.

use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use super::TensorError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise binary operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Right-hand operand of [`Tape::elementwise`].
#[derive(Clone, Copy, Debug)]
pub enum Rhs {
    /// Same shape as the left operand.
    Tensor(Var),
    /// A vector indexed by `axis` of a 2-D left operand and broadcast over
    /// the other axis. `axis = 1` divides/multiplies column `j` by `v[j]`.
    Along(Var, usize),
    Scalar(f32),
}

/// Precomputed rotary-embedding angles for one sequence length.
#[derive(Debug)]
pub struct RopeTable {
    seq_len: usize,
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub fn new(seq_len: usize, head_dim: usize, base: f32) -> Self {
        assert!(head_dim % 2 == 0, "rotary embedding needs an even head dim");
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq_len * half);
        let mut sin = Vec::with_capacity(seq_len * half);
        for t in 0..seq_len {
            for i in 0..half {
                let freq = (base as f64).powf(-2.0 * i as f64 / head_dim as f64);
                let theta = t as f64 * freq;
                cos.push(theta.cos() as f32);
                sin.push(theta.sin() as f32);
            }
        }
        Self { seq_len, half, cos, sin }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
}

/// Shape of a packed multi-sequence attention input: `n_seqs` sequences of
/// `seq_len` rows each, stacked row-wise, with `n_heads` column blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub n_seqs: usize,
    pub seq_len: usize,
    pub n_heads: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinOp, Var, Var),
    Along(BinOp, Var, Var, usize),
    Scalar(BinOp, Var, f32),
    Exp(Var),
    Silu(Var),
    Sum(Var),
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f32> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
    Embedding { table: Var, ids: Vec<usize> },
    Rope { x: Var, table: Rc<RopeTable>, n_heads: usize },
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout, probs: Vec<f32> },
    StraightThrough { x: Var, pass: Vec<bool> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
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

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a `requires_grad` leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var, TensorError> {
        if cfg!(debug_assertions) {
            if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: name, index });
            }
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 {
            return Err(dim_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k as isize, 1), bv.data(), (n as isize, 1), &mut out, n as isize, false);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn elementwise(&mut self, op: BinOp, a: Var, rhs: Rhs) -> Result<Var, TensorError> {
        match rhs {
            Rhs::Tensor(b) => self.binary(op, a, b),
            Rhs::Along(v, axis) => self.along(op, a, v, axis),
            Rhs::Scalar(s) => self.scalar(op, a, s),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinOp::Div, a, b)
    }

    pub fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("elementwise", av, bv));
        }
        if op == BinOp::Div && bv.data().contains(&0.0) {
            return Err(TensorError::DivideByZero { op: "elementwise" });
        }
        let f = binop_fn(op);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, Op::Binary(op, a, b), &[a, b], "elementwise")
    }

    /// Broadcasts vector `v` along `axis` of the 2-D tensor `a`.
    pub fn along(&mut self, op: BinOp, a: Var, v: Var, axis: usize) -> Result<Var, TensorError> {
        let (av, vv) = (self.value(a), self.value(v));
        let (r, c) = av.dims2()?;
        let want = match axis {
            0 => r,
            1 => c,
            _ => return Err(TensorError::Contract(format!("broadcast axis {axis} out of range"))),
        };
        if vv.ndim() != 1 || vv.numel() != want {
            return Err(dim_err("broadcast", av, vv));
        }
        if op == BinOp::Div && vv.data().contains(&0.0) {
            return Err(TensorError::DivideByZero { op: "broadcast" });
        }
        let f = binop_fn(op);
        let (ad, vd) = (av.data(), vv.data());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let s = if axis == 0 { vd[i] } else { vd[j] };
                data.push(f(ad[i * c + j], s));
            }
        }
        let out = Tensor::from_parts(vec![r, c], data);
        self.push(out, Op::Along(op, a, v, axis), &[a, v], "broadcast")
    }

    pub fn scalar(&mut self, op: BinOp, a: Var, s: f32) -> Result<Var, TensorError> {
        if op == BinOp::Div && s == 0.0 {
            return Err(TensorError::DivideByZero { op: "scalar" });
        }
        let f = binop_fn(op);
        let out = self.value(a).map(|x| f(x, s));
        self.push(out, Op::Scalar(op, a, s), &[a], "scalar")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(f32::exp);
        self.push(out, Op::Exp(a), &[a], "exp")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), &[a], "silu")
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(a), &[a], "sum")
    }

    /// Row-wise softmax over the last axis of a 2-D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        self.push(Tensor::from_parts(vec![r, c], out), Op::Softmax(a), &[a], "softmax")
    }

    /// `y[r, j] = x[r, j] / rms(x[r, :]) * gain[j]`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var, TensorError> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let (r, c) = xv.dims2()?;
        if gv.ndim() != 1 || gv.numel() != c {
            return Err(dim_err("rmsnorm", xv, gv));
        }
        let g = gv.data();
        let mut out = Vec::with_capacity(r * c);
        let mut inv_rms = Vec::with_capacity(r);
        for row in xv.data().chunks(c) {
            let ms: f32 = row.iter().map(|v| v * v).sum::<f32>() / c as f32;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(g).map(|(v, gj)| v * inv * gj));
        }
        let out = Tensor::from_parts(vec![r, c], out);
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain], "rmsnorm")
    }

    /// Mean token cross-entropy of `logits` (rows) against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let (r, c) = lv.dims2()?;
        if targets.len() != r {
            return Err(TensorError::Contract(format!(
                "cross_entropy: {} targets for {r} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Contract(format!("target {t} out of range for {c} classes")));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            softmax_in_place(row);
            total -= (row[t].max(f32::MIN_POSITIVE) as f64).ln();
        }
        let loss = Tensor::scalar((total / r as f64) as f32);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(loss, op, &[logits], "cross_entropy")
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        let (v, d) = tv.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Contract(format!("token id {id} >= vocab {v}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], out);
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, &[table], "embedding")
    }

    /// Rotary position embedding. Row `r` sits at position `r % seq_len`.
    pub fn rope(&mut self, x: Var, table: &Rc<RopeTable>, n_heads: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if c != n_heads * table.half * 2 || r % table.seq_len != 0 {
            return Err(TensorError::Contract(format!(
                "rope: shape {r}x{c} incompatible with {n_heads} heads, seq_len {}",
                table.seq_len
            )));
        }
        let mut out = xv.data().to_vec();
        rotate(&mut out, table, n_heads, c, false);
        let op = Op::Rope {
            x,
            table: Rc::clone(table),
            n_heads,
        };
        self.push(Tensor::from_parts(vec![r, c], out), op, &[x], "rope")
    }

    /// Causal multi-head scaled dot-product attention over packed sequences.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var, TensorError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dims2()?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(dim_err("attention", qv, kv));
        }
        let AttnLayout { n_seqs, seq_len: t, n_heads } = layout;
        if rows != n_seqs * t || d % n_heads != 0 {
            return Err(TensorError::Contract(format!(
                "attention: {rows}x{d} does not match {n_seqs} seqs x {t} positions, {n_heads} heads"
            )));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0f32; n_seqs * n_heads * t * t];
        let mut out = vec![0.0f32; rows * d];
        let ds = d as isize;
        for s in 0..n_seqs {
            for h in 0..n_heads {
                let base = s * t * d + h * dh;
                let p = &mut probs[(s * n_heads + h) * t * t..][..t * t];
                // S = Q·Kᵀ
                gemm(t, dh, t, &qv.data()[base..], (ds, 1), &kv.data()[base..], (1, ds), p, t as isize, false);
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    for x in row[..=i].iter_mut() {
                        *x *= scale;
                    }
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].fill(0.0);
                }
                gemm(t, t, dh, p, (t as isize, 1), &vv.data()[base..], (ds, 1), &mut out[base..], ds, false);
            }
        }
        let out = Tensor::from_parts(vec![rows, d], out);
        self.push(out, Op::Attention { q, k, v, layout, probs }, &[q, k, v], "attention")
    }

    /// Records `value` as a function of `x` whose gradient is the upstream
    /// gradient where `pass` is true and zero elsewhere.
    pub fn straight_through(&mut self, x: Var, value: Tensor, pass: Vec<bool>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if value.shape() != xv.shape() || pass.len() != xv.numel() {
            return Err(dim_err("straight_through", xv, &value));
        }
        self.push(value, Op::StraightThrough { x, pass }, &[x], "straight_through")
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if start > end || end > c {
            return Err(TensorError::Contract(format!("slice_cols {start}..{end} of {c} columns")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for row in xv.data().chunks(c.max(1)).take(r) {
            out.extend_from_slice(&row[start..end]);
        }
        self.push(Tensor::from_parts(vec![r, w], out), Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, ca) = av.dims2()?;
        let (r2, cb) = bv.dims2()?;
        if r != r2 {
            return Err(dim_err("concat_cols", av, bv));
        }
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&av.data()[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv.data()[i * cb..(i + 1) * cb]);
        }
        let out = Tensor::from_parts(vec![r, ca + cb], out);
        self.push(out, Op::ConcatCols(a, b), &[a, b], "concat_cols")
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let shape = self.nodes[i].value.shape().to_vec();
                self.nodes[i].grad = Some(Tensor::from_parts(shape, g));
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).shape()[1];
                if wants(*a) {
                    // dA = dC·Bᵀ
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, (n as isize, 1), val(*b).data(), (1, n as isize), ga, k as isize, true);
                }
                if wants(*b) {
                    // dB = Aᵀ·dC
                    let gb = slot(grads, *b, k * n);
                    gemm(k, m, n, val(*a).data(), (1, k as isize), g, (n as isize, 1), gb, n as isize, true);
                }
            }
            Op::Binary(op, a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = slot(grads, *a, ad.len());
                    for j in 0..ga.len() {
                        ga[j] += match op {
                            BinOp::Add | BinOp::Sub => g[j],
                            BinOp::Mul => g[j] * bd[j],
                            BinOp::Div => g[j] / bd[j],
                        };
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, bd.len());
                    for j in 0..gb.len() {
                        gb[j] += match op {
                            BinOp::Add => g[j],
                            BinOp::Sub => -g[j],
                            BinOp::Mul => g[j] * ad[j],
                            BinOp::Div => -g[j] * ad[j] / (bd[j] * bd[j]),
                        };
                    }
                }
            }
            Op::Along(op, a, v, axis) => {
                let (r, c) = val(*a).dims2().unwrap();
                let (ad, vd) = (val(*a).data(), val(*v).data());
                let bcast = |i: usize, j: usize| if *axis == 0 { i } else { j };
                if wants(*a) {
                    let ga = slot(grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            let s = vd[bcast(i, j)];
                            ga[i * c + j] += match op {
                                BinOp::Add | BinOp::Sub => g[i * c + j],
                                BinOp::Mul => g[i * c + j] * s,
                                BinOp::Div => g[i * c + j] / s,
                            };
                        }
                    }
                }
                if wants(*v) {
                    let gv = slot(grads, *v, vd.len());
                    for i in 0..r {
                        for j in 0..c {
                            let s = vd[bcast(i, j)];
                            let (x, gij) = (ad[i * c + j], g[i * c + j]);
                            gv[bcast(i, j)] += match op {
                                BinOp::Add => gij,
                                BinOp::Sub => -gij,
                                BinOp::Mul => gij * x,
                                BinOp::Div => -gij * x / (s * s),
                            };
                        }
                    }
                }
            }
            Op::Scalar(op, a, s) => {
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    let factor = match op {
                        BinOp::Add | BinOp::Sub => 1.0,
                        BinOp::Mul => *s,
                        BinOp::Div => 1.0 / *s,
                    };
                    for (x, gj) in ga.iter_mut().zip(g) {
                        *x += gj * factor;
                    }
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((x, gj), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += gj * y;
                    }
                }
            }
            Op::Silu(a) => {
                if wants(*a) {
                    let ad = val(*a).data();
                    let ga = slot(grads, *a, g.len());
                    for ((x, gj), &z) in ga.iter_mut().zip(g).zip(ad) {
                        let s = sigmoid(z);
                        *x += gj * s * (1.0 + z * (1.0 - s));
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let n = val(*a).numel();
                    let ga = slot(grads, *a, n);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let c = out.shape()[1];
                    let ga = slot(grads, *a, g.len());
                    for ((gr, yr), xr) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            xr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (r, c) = val(*x).dims2().unwrap();
                let (xd, gd) = (val(*x).data(), val(*gain).data());
                if wants(*gain) {
                    let gg = slot(grads, *gain, c);
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xd[i * c + j] * inv_rms[i];
                        }
                    }
                }
                if wants(*x) {
                    let gx = slot(grads, *x, r * c);
                    for i in 0..r {
                        let inv = inv_rms[i];
                        let xr = &xd[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f32 = (0..c).map(|j| gr[j] * gd[j] * xr[j]).sum();
                        let coef = inv * inv * inv * dot / c as f32;
                        for j in 0..c {
                            gx[i * c + j] += inv * gd[j] * gr[j] - coef * xr[j];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if wants(*logits) {
                    let (r, c) = val(*logits).dims2().unwrap();
                    let scale = g[0] / r as f32;
                    let gl = slot(grads, *logits, r * c);
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let y = if j == t { 1.0 } else { 0.0 };
                            gl[i * c + j] += (probs[i * c + j] - y) * scale;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let (v, d) = val(*table).dims2().unwrap();
                    let gt = slot(grads, *table, v * d);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Rope { x, table, n_heads } => {
                if wants(*x) {
                    let c = out.shape()[1];
                    let mut back = g.to_vec();
                    rotate(&mut back, table, *n_heads, c, true);
                    let gx = slot(grads, *x, g.len());
                    for (a, b) in gx.iter_mut().zip(&back) {
                        *a += b;
                    }
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                self.attention_backward(*q, *k, *v, *layout, probs, g, grads);
            }
            Op::StraightThrough { x, pass } => {
                if wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    for ((a, b), &p) in gx.iter_mut().zip(g).zip(pass) {
                        if p {
                            *a += b;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (r, c) = val(*x).dims2().unwrap();
                    let w = out.shape()[1];
                    let gx = slot(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..w {
                            gx[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = val(*a).dims2().unwrap();
                let cb = val(*b).shape()[1];
                let c = ca + cb;
                if wants(*a) {
                    let ga = slot(grads, *a, r * ca);
                    for i in 0..r {
                        for j in 0..ca {
                            ga[i * ca + j] += g[i * c + j];
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, r * cb);
                    for i in 0..r {
                        for j in 0..cb {
                            gb[i * cb + j] += g[i * c + ca + j];
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let nodes = &self.nodes;
        let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
        let d = nodes[q.0].value.shape()[1];
        let AttnLayout { n_seqs, seq_len: t, n_heads } = layout;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let ds = d as isize;
        let ts = t as isize;
        let rows = n_seqs * t;
        let mut gq = vec![0.0f32; rows * d];
        let mut gk = vec![0.0f32; rows * d];
        let mut gv = vec![0.0f32; rows * d];
        let mut dp = vec![0.0f32; t * t];
        for s in 0..n_seqs {
            for h in 0..n_heads {
                let base = s * t * d + h * dh;
                let p = &probs[(s * n_heads + h) * t * t..][..t * t];
                // dV = Pᵀ·dC
                gemm(t, t, dh, p, (1, ts), &g[base..], (ds, 1), &mut gv[base..], ds, true);
                // dP = dC·Vᵀ
                gemm(t, dh, t, &g[base..], (ds, 1), &vd[base..], (1, ds), &mut dp, ts, false);
                for i in 0..t {
                    let pr = &p[i * t..(i + 1) * t];
                    let dr = &mut dp[i * t..(i + 1) * t];
                    let dot: f32 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                    dr[i + 1..].fill(0.0);
                }
                // dQ = dS·K, dK = dSᵀ·Q
                gemm(t, t, dh, &dp, (ts, 1), &kd[base..], (ds, 1), &mut gq[base..], ds, true);
                gemm(t, t, dh, &dp, (1, ts), &qd[base..], (ds, 1), &mut gk[base..], ds, true);
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if nodes[var.0].requires_grad {
                let dst = slot(grads, var, rows * d);
                for (a, b) in dst.iter_mut().zip(&local) {
                    *a += b;
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

fn binop_fn(op: BinOp) -> fn(f32, f32) -> f32 {
    match op {
        BinOp::Add => |a, b| a + b,
        BinOp::Sub => |a, b| a - b,
        BinOp::Mul => |a, b| a * b,
        BinOp::Div => |a, b| a / b,
    }
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f32;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn rotate(buf: &mut [f32], table: &RopeTable, n_heads: usize, cols: usize, inverse: bool) {
    let half = table.half;
    let dh = 2 * half;
    for (r, row) in buf.chunks_mut(cols).enumerate() {
        let pos = r % table.seq_len;
        let cos = &table.cos[pos * half..(pos + 1) * half];
        let sin = &table.sin[pos * half..(pos + 1) * half];
        for h in 0..n_heads {
            let head = &mut row[h * dh..(h + 1) * dh];
            for i in 0..half {
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                head[2 * i] = x0 * c - x1 * s;
                head[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}
