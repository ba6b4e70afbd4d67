//! Linear tape of tensor primitives with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order and parents always precede their
//! children, so walking the node list backwards is a reverse topological
//! traversal. Parameters are borrowed from a [`ParamStore`] rather than
//! copied; their gradients come back as a [`Gradients`] aligned with the store.

use std::borrow::Cow;

use rand::Rng;

use super::kernels;
use super::kernels::{
    attention_backward, attention_forward, causal_depthwise_conv, depthwise_conv_backward, gemm,
    layer_norm_rows, sigmoid, softplus, GemmLayout,
};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a fused primitive whose forward was computed outside the tape.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, `None` where `needs[i]` is false.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Silu,
    Sigmoid,
    Softplus,
    Exp,
    Tanh,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    FlipRows(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    DwConv {
        x: Var,
        w: Var,
        b: Var,
        width: usize,
        left_pad: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    },
    Glu(Var),
    MeanRows(Var),
    Sum(Var),
    MaskMul(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        target: usize,
        weight: f64,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients for every parameter of a store; untouched parameters hold exact zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros(params: &ParamStore) -> Self {
        Self {
            grads: params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b).expect("gradient shapes agree");
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    fn add_into(&mut self, id: ParamId, g: &Tensor) {
        self.grads[id.0].add_assign(g).expect("param gradient shape");
    }
}

/// Records tensor operations for one forward pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_nodes: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<'p> Graph<'p> {
    /// Graph that tracks gradients for all parameters of `params`.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            grad_enabled: true,
        }
    }

    /// Forward-only graph; fused ops skip saving backward state.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(params)
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|&p| self.needs(p));
        self.push_raw(Cow::Owned(value), op, needs_grad)
    }

    fn push_raw(&mut self, value: Cow<'p, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Parent nodes of `v`, for inspecting tape structure.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Unary(a, _)
            | Op::FlipRows(a)
            | Op::Transpose(a)
            | Op::SliceCols(a, _)
            | Op::SoftmaxRows(a)
            | Op::Glu(a)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::MaskMul(a, _) => vec![*a],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::DwConv { x, w, b, .. } => vec![*x, *w, *b],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ConcatCols(vs) => vs.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(Cow::Owned(t), Op::Leaf, false)
    }

    /// Node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = self.push_raw(Cow::Borrowed(self.params.get(id)), Op::Param(id), self.grad_enabled);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let cols = xv.cols();
        if rv.len() != cols {
            return shape_err("add_row", xv.shape(), rv.shape());
        }
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(cols.max(1)) {
            for (o, r) in chunk.iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let xv = self.value(x);
        let out = match kind {
            Unary::Silu => Tensor::new(xv.shape(), kernels::silu_forward(xv.data())).expect("same shape"),
            Unary::Sigmoid => Tensor::new(xv.shape(), kernels::sigmoid_forward(xv.data())).expect("same shape"),
            Unary::Softplus => xv.map(softplus),
            Unary::Exp => xv.map(f64::exp),
            Unary::Tanh => xv.map(f64::tanh),
        };
        self.push(out, Op::Unary(x, kind), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    /// Per-row normalization with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = xv.cols();
        if gv.len() != cols || bv.len() != cols {
            return shape_err("layer_norm", xv.shape(), gv.shape());
        }
        let (out, mean, rstd) = layer_norm_rows(xv.data(), cols, gv.data(), bv.data(), eps);
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, mean, rstd }, &[x, gamma, beta]))
    }

    /// Reverses the time (row) axis.
    pub fn flip_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).flip_rows();
        self.push(out, Op::FlipRows(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), &[x])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if start > end || end > c {
            return Err(Error::InvalidArgument(format!("slice {start}..{end} of {c} columns")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&xv.data()[i * c + start..i * c + end]);
        }
        let out = Tensor::new([r, w], data)?;
        Ok(self.push(out, Op::SliceCols(x, start), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return shape_err("concat_cols", self.value(parts[0]).shape(), v.shape());
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new([rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols().max(1);
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Depthwise temporal convolution, see [`causal_depthwise_conv`].
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var, left_pad: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let ch = xv.cols();
        let width = wv.rows();
        if wv.cols() != ch || bv.len() != ch || left_pad >= width.max(1) {
            return shape_err("depthwise_conv", xv.shape(), wv.shape());
        }
        let out = causal_depthwise_conv(xv.data(), ch, wv.data(), bv.data(), width, left_pad);
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push(out, Op::DwConv { x, w, b, width, left_pad }, &[x, w, b]))
    }

    /// Multi-head scaled dot-product attention over `T×D` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return shape_err("attention", qv.shape(), kv.shape());
        }
        let (t, d) = qv.dims2();
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!("model dim {d} not divisible by {heads} heads")));
        }
        let out = attention_forward(qv.data(), kv.data(), vv.data(), t, d, heads);
        let out = Tensor::new([t, d], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads }, &[q, k, v]))
    }

    /// Gated linear unit over columns: `a ⊙ σ(b)` with `[a | b] = x`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if c % 2 != 0 {
            return Err(Error::InvalidArgument(format!("glu needs even width, got {c}")));
        }
        let h = c / 2;
        let mut data = Vec::with_capacity(r * h);
        for i in 0..r {
            let row = xv.row(i);
            for j in 0..h {
                data.push(row[j] * sigmoid(row[h + j]));
            }
        }
        let out = Tensor::new([r, h], data)?;
        Ok(self.push(out, Op::Glu(x), &[x]))
    }

    /// Column means, `T×D → 1×D`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, v) in data.iter_mut().zip(xv.row(i)) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= r as f64;
        }
        let out = Tensor::new([1, c], data).expect("mean shape");
        self.push(out, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.value(x).zip_map(&Tensor::new(self.shape(x), mask.clone()).unwrap(), "dropout", |a, m| a * m).unwrap();
        self.push(out, Op::MaskMul(x, mask), &[x])
    }

    /// `-weight · log softmax(logits)[target]` for a single row of logits.
    pub fn weighted_cross_entropy(&mut self, logits: Var, target: usize, weight: f64) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != 1 || target >= lv.cols() {
            return Err(Error::InvalidArgument(format!(
                "cross entropy target {target} for logits {:?}",
                lv.shape()
            )));
        }
        let lse = log_sum_exp(lv.data());
        let out = Tensor::scalar(-weight * (lv.data()[target] - lse));
        Ok(self.push(out, Op::CrossEntropy { logits, target, weight }, &[logits]))
    }

    /// Inserts the result of a fused forward computed elsewhere.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, inputs)
    }

    /// Fails with the given stage name if `v` holds NaN or ±∞.
    pub fn check_finite(&self, v: Var, stage: &str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { stage: stage.to_string() })
        }
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut out = Gradients::zeros(self.params);
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            let emit = |grads: &mut Vec<Option<Tensor>>, v: Var, t: Tensor| {
                if !self.needs(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t).expect("gradient shape"),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.add_into(*id, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.dims2();
                    let n = bv.cols();
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(GemmLayout::NT, m, n, k, g.data(), bv.data(), &mut da, false);
                        emit(&mut grads, *a, Tensor::new(av.shape(), da)?);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(GemmLayout::TN, k, m, n, av.data(), g.data(), &mut db, false);
                        emit(&mut grads, *b, Tensor::new(bv.shape(), db)?);
                    }
                }
                Op::Add(a, b) => {
                    emit(&mut grads, *a, g.clone());
                    emit(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    emit(&mut grads, *b, g.scale(-1.0));
                    emit(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.mul(self.value(*b))?;
                    let db = g.mul(self.value(*a))?;
                    emit(&mut grads, *a, da);
                    emit(&mut grads, *b, db);
                }
                Op::AddRow(x, row) => {
                    let rv = self.value(*row);
                    let cols = rv.len();
                    let mut dr = vec![0.0; cols];
                    for chunk in g.data().chunks(cols.max(1)) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    emit(&mut grads, *row, Tensor::new(rv.shape(), dr)?);
                    emit(&mut grads, *x, g);
                }
                Op::Scale(x, s) => emit(&mut grads, *x, g.scale(*s)),
                Op::Unary(x, kind) => {
                    let xv = self.value(*x);
                    let yv = &node.value;
                    let d = match kind {
                        Unary::Silu => Tensor::new(xv.shape(), kernels::silu_backward(xv.data(), g.data()))?,
                        Unary::Sigmoid => yv.zip_map(&g, "sigmoid'", |y, gg| gg * y * (1.0 - y))?,
                        Unary::Softplus => Tensor::new(xv.shape(), kernels::sigmoid_times(xv.data(), g.data()))?,
                        Unary::Exp => yv.zip_map(&g, "exp'", |y, gg| gg * y)?,
                        Unary::Tanh => yv.zip_map(&g, "tanh'", |y, gg| gg * (1.0 - y * y))?,
                    };
                    emit(&mut grads, *x, d);
                }
                Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let cols = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    let mut xhat = vec![0.0; cols];
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..mean.len() {
                        let row = &xv.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            xhat[c] = (row[c] - mean[r]) * rstd[r];
                            dxhat[c] = gr[c] * gv.data()[c];
                            dgamma[c] += gr[c] * xhat[c];
                            dbeta[c] += gr[c];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] = rstd[r] * (dxhat[c] - m1 - xhat[c] * m2);
                        }
                    }
                    emit(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                    emit(&mut grads, *gamma, Tensor::new(gv.shape(), dgamma)?);
                    emit(&mut grads, *beta, Tensor::new(self.shape(*beta), dbeta)?);
                }
                Op::FlipRows(x) => emit(&mut grads, *x, g.flip_rows()),
                Op::Transpose(x) => emit(&mut grads, *x, g.transpose()),
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let (r, c) = xv.dims2();
                    let w = g.cols();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                    }
                    emit(&mut grads, *x, Tensor::new(xv.shape(), d)?);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        emit(&mut grads, p, Tensor::new(self.shape(p), d)?);
                    }
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let cols = y.cols().max(1);
                    let mut d = g.clone();
                    for (dr, yr) in d.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, yv) in dr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    emit(&mut grads, *x, d);
                }
                Op::DwConv { x, w, b, width, left_pad } => {
                    let xv = self.value(*x);
                    let (dx, dw, db) = depthwise_conv_backward(xv.data(), xv.cols(), self.value(*w).data(), *width, *left_pad, g.data());
                    emit(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                    emit(&mut grads, *w, Tensor::new(self.shape(*w), dw)?);
                    emit(&mut grads, *b, Tensor::new(self.shape(*b), db)?);
                }
                Op::Attention { q, k, v, heads } => {
                    let qv = self.value(*q);
                    let (t, d) = qv.dims2();
                    let (dq, dk, dv) = attention_backward(qv.data(), self.value(*k).data(), self.value(*v).data(), g.data(), t, d, *heads);
                    emit(&mut grads, *q, Tensor::new([t, d], dq)?);
                    emit(&mut grads, *k, Tensor::new([t, d], dk)?);
                    emit(&mut grads, *v, Tensor::new([t, d], dv)?);
                }
                Op::Glu(x) => {
                    let xv = self.value(*x);
                    let (r, c) = xv.dims2();
                    let h = c / 2;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let row = xv.row(i);
                        let gr = g.row(i);
                        for j in 0..h {
                            let s = sigmoid(row[h + j]);
                            d[i * c + j] = gr[j] * s;
                            d[i * c + h + j] = gr[j] * row[j] * s * (1.0 - s);
                        }
                    }
                    emit(&mut grads, *x, Tensor::new(xv.shape(), d)?);
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let (r, c) = xv.dims2();
                    let mut d = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        d.extend(g.data().iter().map(|v| v / r as f64));
                    }
                    emit(&mut grads, *x, Tensor::new(xv.shape(), d)?);
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    emit(&mut grads, *x, Tensor::full(self.shape(*x), gv));
                }
                Op::MaskMul(x, mask) => {
                    let d: Vec<f64> = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                    emit(&mut grads, *x, Tensor::new(g.shape(), d)?);
                }
                Op::CrossEntropy { logits, target, weight } => {
                    let lv = self.value(*logits);
                    let lse = log_sum_exp(lv.data());
                    let gv = g.data()[0];
                    let d: Vec<f64> = lv
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &l)| {
                            let p = (l - lse).exp();
                            gv * weight * (p - if j == *target { 1.0 } else { 0.0 })
                        })
                        .collect();
                    emit(&mut grads, *logits, Tensor::new(lv.shape(), d)?);
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                    let ds = op.backward(&ins, &node.value, &g, &needs)?;
                    for (&v, d) in inputs.iter().zip(ds) {
                        if let Some(d) = d {
                            emit(&mut grads, v, d);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
