//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value plus whatever the
//! backward pass needs. Node ids are only valid on the tape that issued them;
//! a tape lives on one thread and is discarded after [`Tape::backward`].

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm, gemm_strided, Tensor};
use super::NumericsError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Smallest probability fed to a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// `ln(max(p, LOG_CLAMP))`, except that NaN stays NaN so divergence is visible.
fn clamp_log(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        p.max(LOG_CLAMP).ln()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRowBias(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    Transpose(usize),
    Reshape(usize),
    Calibrate {
        a: usize,
        heads: usize,
        lambda: f64,
        row_scale: Vec<f64>,
    },
    NormalizeRows {
        x: usize,
        sums: Vec<f64>,
    },
    Sum(usize),
    CrossEntropy {
        probs: usize,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Inputs of every node precede it.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `node`; `None` when the node does
    /// not depend on any trainable leaf.
    pub fn get(&self, node: NodeId) -> Result<Option<&Tensor>, NumericsError> {
        if node.tape != self.tape || node.index >= self.grads.len() {
            return Err(NumericsError::ForeignNode);
        }
        Ok(self.grads[node.index].as_ref())
    }

    pub(crate) fn take(&mut self, node: NodeId) -> Result<Option<Tensor>, NumericsError> {
        if node.tape != self.tape || node.index >= self.grads.len() {
            return Err(NumericsError::ForeignNode);
        }
        Ok(self.grads[node.index].take())
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, node: NodeId) -> Result<usize, NumericsError> {
        if node.tape != self.id || node.index >= self.nodes.len() {
            return Err(NumericsError::ForeignNode);
        }
        Ok(node.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn v(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn dims2(&self, i: usize, op: &'static str) -> Result<(usize, usize), NumericsError> {
        self.v(i)
            .dims2()
            .ok_or_else(|| shape_err(op, format!("expected rank 2, got {:?}", self.v(i).shape())))
    }

    /// Trainable leaf.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        assert_eq!(node.tape, self.id, "node from a different tape");
        &self.nodes[node.index].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (m, n) = self.dims2(ai, "matmul")?;
        let (n2, p) = self.dims2(bi, "matmul")?;
        if n != n2 {
            return Err(shape_err("matmul", format!("[{m}x{n}] · [{n2}x{p}]")));
        }
        let mut out = vec![0.0; m * p];
        gemm(m, n, p, self.v(ai).data(), self.v(bi).data(), &mut out, false);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(Tensor::new(vec![m, p], out)?, Op::MatMul(ai, bi), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if self.v(ai).shape() != self.v(bi).shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.v(ai).shape(), self.v(bi).shape()),
            ));
        }
        let data = self.v(ai).data().iter().zip(self.v(bi).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.v(ai).shape().to_vec(), data)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(value, Op::Add(ai, bi), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if self.v(ai).shape() != self.v(bi).shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", self.v(ai).shape(), self.v(bi).shape()),
            ));
        }
        let data = self.v(ai).data().iter().zip(self.v(bi).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.v(ai).shape().to_vec(), data)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(value, Op::Mul(ai, bi), rg))
    }

    /// `x[m×n] + bias[n]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let (xi, bi) = (self.idx(x)?, self.idx(bias)?);
        let (m, n) = self.dims2(xi, "add_row_bias")?;
        if self.v(bi).len() != n {
            return Err(shape_err("add_row_bias", format!("bias {:?} for width {n}", self.v(bi).shape())));
        }
        let b = self.v(bi).data();
        let mut data = self.v(xi).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.rg(xi) || self.rg(bi);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRowBias(xi, bi), rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, NumericsError> {
        let xi = self.idx(x)?;
        let data = self.v(xi).data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.v(xi).shape().to_vec(), data)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Scale(xi, factor), rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xi = self.idx(x)?;
        let data = self.v(xi).data().iter().map(|v| if *v < 0.0 { 0.0 } else { *v }).collect();
        let value = Tensor::new(self.v(xi).shape().to_vec(), data)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Relu(xi), rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        let xi = self.idx(x)?;
        let shape = self.v(xi).shape().to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::InvalidAxis { axis, rank: shape.len() });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.v(xi).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let rg = self.rg(xi);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x: xi, outer, len, inner }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let rank = self.value(x).shape().len();
        if rank == 0 {
            return Err(NumericsError::InvalidAxis { axis: 0, rank });
        }
        self.softmax(x, rank - 1)
    }

    /// Row-wise layer normalization with affine `gain` and `bias` over the last axis.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId, NumericsError> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let (m, n) = self.dims2(xi, "layer_norm")?;
        if self.v(gi).len() != n || self.v(bi).len() != n {
            return Err(shape_err(
                "layer_norm",
                format!("gain {:?} / bias {:?} for width {n}", self.v(gi).shape(), self.v(bi).shape()),
            ));
        }
        let (g, b) = (self.v(gi).data(), self.v(bi).data());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = self.v(xi).row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity (same node) outside training or at rate 0.
    pub fn dropout(&mut self, x: NodeId, rate: f64, training: bool, seed: u64) -> Result<NodeId, NumericsError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::InvalidRate(rate));
        }
        let xi = self.idx(x)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<f64> = (0..self.v(xi).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.v(xi).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(self.v(xi).shape().to_vec(), data)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Dropout { x: xi, mask }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let idx = parts.iter().map(|p| self.idx(*p)).collect::<Result<Vec<_>, _>>()?;
        let first = *idx.first().ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (r, c) = self.dims2(i, "concat_cols")?;
            if r != m {
                return Err(shape_err("concat_cols", format!("row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &i in &idx {
                out.extend_from_slice(self.v(i).row(r));
            }
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(idx), rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let idx = parts.iter().map(|p| self.idx(*p)).collect::<Result<Vec<_>, _>>()?;
        let first = *idx.first().ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &i in &idx {
            let (r, c) = self.dims2(i, "concat_rows")?;
            if c != n {
                return Err(shape_err("concat_rows", format!("widths {n} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.v(i).data());
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::ConcatRows(idx), rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let xi = self.idx(x)?;
        let (m, n) = self.dims2(xi, "slice_cols")?;
        if start + len > n {
            return Err(shape_err("slice_cols", format!("{start}..{} of width {n}", start + len)));
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&self.v(xi).row(r)[start..start + len]);
        }
        let rg = self.rg(xi);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x: xi, start }, rg))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let xi = self.idx(x)?;
        let (m, n) = self.dims2(xi, "slice_rows")?;
        if start + len > m {
            return Err(shape_err("slice_rows", format!("{start}..{} of {m} rows", start + len)));
        }
        let out = self.v(xi).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(xi);
        Ok(self.push(Tensor::new(vec![len, n], out)?, Op::SliceRows { x: xi, start }, rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xi = self.idx(x)?;
        let (m, n) = self.dims2(xi, "transpose")?;
        let src = self.v(xi).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = src[r * n + c];
            }
        }
        let rg = self.rg(xi);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(xi), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        let xi = self.idx(x)?;
        let value = self.v(xi).reshaped(shape)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Reshape(xi), rg))
    }

    /// Uncertainty-aware rescaling of stacked attention maps.
    ///
    /// `a` holds `heads` attention matrices stacked along rows, shape
    /// `[heads·n_q × n_k]`. Query row `i` of every head is multiplied by
    /// `1 + lambda·u_i`, where `u_i` is the head-averaged entropy of row `i`
    /// divided by `ln n_k`. Gradients flow through `u` as well.
    pub fn calibrate(&mut self, a: NodeId, heads: usize, lambda: f64) -> Result<NodeId, NumericsError> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(NumericsError::NegativeLambda(lambda));
        }
        let ai = self.idx(a)?;
        let (rows, n_k) = self.dims2(ai, "calibrate")?;
        if heads == 0 || rows % heads != 0 {
            return Err(shape_err("calibrate", format!("{rows} rows for {heads} heads")));
        }
        let n_q = rows / heads;
        let uncertainty = stacked_row_uncertainty(self.v(ai).data(), heads, n_q, n_k);
        let row_scale: Vec<f64> = uncertainty.iter().map(|u| 1.0 + lambda * u).collect();
        let src = self.v(ai).data();
        let mut out = vec![0.0; src.len()];
        for h in 0..heads {
            for i in 0..n_q {
                let base = (h * n_q + i) * n_k;
                for j in 0..n_k {
                    out[base + j] = src[base + j] * row_scale[i];
                }
            }
        }
        let rg = self.rg(ai);
        Ok(self.push(
            Tensor::new(vec![rows, n_k], out)?,
            Op::Calibrate {
                a: ai,
                heads,
                lambda,
                row_scale,
            },
            rg,
        ))
    }

    /// Divide every row by its sum.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xi = self.idx(x)?;
        let (m, n) = self.dims2(xi, "normalize_rows")?;
        let src = self.v(xi).data();
        let sums: Vec<f64> = (0..m).map(|r| src[r * n..(r + 1) * n].iter().sum()).collect();
        let mut out = src.to_vec();
        for (r, row) in out.chunks_mut(n.max(1)).enumerate().take(m) {
            row.iter_mut().for_each(|v| *v /= sums[r]);
        }
        let rg = self.rg(xi);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::NormalizeRows { x: xi, sums }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xi = self.idx(x)?;
        let s = self.v(xi).data().iter().sum();
        let rg = self.rg(xi);
        Ok(self.push(Tensor::scalar(s), Op::Sum(xi), rg))
    }

    /// Mean categorical cross-entropy of probability rows `[B×C]` against class ids `0..C`.
    pub fn cross_entropy(&mut self, probs: NodeId, targets: &[usize]) -> Result<NodeId, NumericsError> {
        let pi = self.idx(probs)?;
        let (b, c) = self.dims2(pi, "cross_entropy")?;
        if targets.len() != b {
            return Err(shape_err("cross_entropy", format!("{} targets for {b} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(NumericsError::TargetOutOfRange { target: t, classes: c });
        }
        let p = self.v(pi);
        let loss = if b == 0 {
            0.0
        } else {
            -targets
                .iter()
                .enumerate()
                .map(|(i, &t)| clamp_log(p.get2(i, t)))
                .sum::<f64>()
                / b as f64
        };
        let rg = self.rg(pi);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs: pi,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumericsError> {
        let li = self.idx(loss)?;
        if self.v(li).len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.v(li).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match g {
                Some(g) if self.nodes[i].requires_grad => {
                    Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = self.v(*a).dims2().expect("rank 2");
                let p = node.value.shape()[1];
                if self.rg(*a) {
                    // ga += g · bᵀ
                    let ga = slot(grads, *a, m * n);
                    gemm_strided(m, p, n, g, (p as isize, 1), self.v(*b).data(), (1, p as isize), ga, true);
                }
                if self.rg(*b) {
                    // gb += aᵀ · g
                    let gb = slot(grads, *b, n * p);
                    gemm_strided(n, m, p, self.v(*a).data(), (1, n as isize), g, (p as isize, 1), gb, true);
                }
            }
            Op::Add(a, b) => {
                for &k in [a, b].iter() {
                    if self.rg(*k) {
                        accumulate(slot(grads, *k, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let other = self.v(*b).data();
                    let ga = slot(grads, *a, g.len());
                    for ((d, gv), o) in ga.iter_mut().zip(g).zip(other) {
                        *d += gv * o;
                    }
                }
                if self.rg(*b) {
                    let other = self.v(*a).data();
                    let gb = slot(grads, *b, g.len());
                    for ((d, gv), o) in gb.iter_mut().zip(g).zip(other) {
                        *d += gv * o;
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if self.rg(*x) {
                    accumulate(slot(grads, *x, g.len()), g);
                }
                if self.rg(*bias) {
                    let n = self.v(*bias).len();
                    let gb = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        accumulate(gb, row);
                    }
                }
            }
            Op::Scale(x, f) => {
                if self.rg(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (d, gv) in gx.iter_mut().zip(g) {
                        *d += gv * f;
                    }
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let src = self.v(*x).data();
                    let gx = slot(grads, *x, g.len());
                    for ((d, gv), s) in gx.iter_mut().zip(g).zip(src) {
                        if *s > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let gx = slot(grads, *x, g.len());
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let at = |j: usize| o * len * inner + j * inner + ii;
                            let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.v(*gain).len();
                let m = inv_std.len();
                if self.rg(*gain) {
                    let gg = slot(grads, *gain, n);
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        accumulate(gb, row);
                    }
                }
                if self.rg(*x) {
                    let gain_v = self.v(*gain).data().to_vec();
                    let gx = slot(grads, *x, m * n);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..n {
                            let d = g[r * n + c] * gain_v[c];
                            dxhat[c] = d;
                            sum_d += d;
                            sum_dx += d * xhat[r * n + c];
                        }
                        let nf = n as f64;
                        for c in 0..n {
                            gx[r * n + c] +=
                                inv_std[r] / nf * (nf * dxhat[c] - sum_d - xhat[r * n + c] * sum_dx);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.rg(*x) {
                    let gx = slot(grads, *x, g.len());
                    for ((d, gv), mv) in gx.iter_mut().zip(g).zip(mask) {
                        *d += gv * mv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let m = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.v(p).shape()[1];
                    if self.rg(p) {
                        let gp = slot(grads, p, m * w);
                        for r in 0..m {
                            accumulate(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.v(p).len();
                    if self.rg(p) {
                        accumulate(slot(grads, p, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let (m, n) = self.v(*x).dims2().expect("rank 2");
                    let w = node.value.shape()[1];
                    let gx = slot(grads, *x, m * n);
                    for r in 0..m {
                        accumulate(&mut gx[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if self.rg(*x) {
                    let (m, n) = self.v(*x).dims2().expect("rank 2");
                    let gx = slot(grads, *x, m * n);
                    accumulate(&mut gx[start * n..start * n + g.len()], g);
                }
            }
            Op::Transpose(x) => {
                if self.rg(*x) {
                    let (m, n) = self.v(*x).dims2().expect("rank 2");
                    let gx = slot(grads, *x, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    accumulate(slot(grads, *x, g.len()), g);
                }
            }
            Op::Calibrate {
                a,
                heads,
                lambda,
                row_scale,
            } => {
                if self.rg(*a) {
                    let src = self.v(*a).data();
                    let (rows, n_k) = self.v(*a).dims2().expect("rank 2");
                    let n_q = rows / heads;
                    // G_i = Σ_{h,j} g·a over every head's row i.
                    let mut weighted = vec![0.0; n_q];
                    for h in 0..*heads {
                        for i in 0..n_q {
                            let base = (h * n_q + i) * n_k;
                            weighted[i] += (0..n_k).map(|j| g[base + j] * src[base + j]).sum::<f64>();
                        }
                    }
                    let norm = if n_k > 1 {
                        *heads as f64 * (n_k as f64).ln()
                    } else {
                        f64::INFINITY
                    };
                    let ga = slot(grads, *a, rows * n_k);
                    for h in 0..*heads {
                        for i in 0..n_q {
                            let base = (h * n_q + i) * n_k;
                            for j in 0..n_k {
                                let p = src[base + j].max(f64::MIN_POSITIVE);
                                let du = -(p.ln() + 1.0) / norm;
                                ga[base + j] += g[base + j] * row_scale[i] + lambda * weighted[i] * du;
                            }
                        }
                    }
                }
            }
            Op::NormalizeRows { x, sums } => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let n = node.value.shape()[1];
                    let gx = slot(grads, *x, g.len());
                    for (r, s) in sums.iter().enumerate() {
                        let dot: f64 = (0..n).map(|c| g[r * n + c] * y[r * n + c]).sum();
                        for c in 0..n {
                            gx[r * n + c] += (g[r * n + c] - dot) / s;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let gx = slot(grads, *x, self.v(*x).len());
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::CrossEntropy { probs, targets } => {
                if self.rg(*probs) {
                    let (b, c) = self.v(*probs).dims2().expect("rank 2");
                    let p = self.v(*probs);
                    let gp = slot(grads, *probs, b * c);
                    for (i, &t) in targets.iter().enumerate() {
                        let pv = p.get2(i, t);
                        if pv > LOG_CLAMP {
                            gp[i * c + t] -= g[0] / (b as f64 * pv);
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Head-averaged normalized entropy of each query row of stacked attention maps.
pub(crate) fn stacked_row_uncertainty(a: &[f64], heads: usize, n_q: usize, n_k: usize) -> Vec<f64> {
    let mut u = vec![0.0; n_q];
    if n_k <= 1 {
        return u;
    }
    let norm = heads as f64 * (n_k as f64).ln();
    for h in 0..heads {
        for (i, ui) in u.iter_mut().enumerate() {
            let base = (h * n_q + i) * n_k;
            let entropy: f64 = a[base..base + n_k]
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum();
            *ui += entropy;
        }
    }
    u.iter_mut().for_each(|v| *v /= norm);
    u
}
