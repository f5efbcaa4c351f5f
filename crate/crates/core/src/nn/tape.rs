//! Reverse-mode differentiation over a fixed operation set.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! walks it in reverse and accumulates adjoints. Values are immutable once
//! recorded.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{structural, CflError, Result};

use super::kernels::{conv_backward, conv_forward, gemm, ConvGeom};
use super::tensor::{ParamSet, Tensor};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: usize, w: usize, geom: ConvGeom },
    ChannelBias { x: usize, b: usize },
    Relu(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Sum(usize),
    GatherChannels { x: usize, idx: Vec<usize> },
    ScatterChannels { x: usize, idx: Vec<usize> },
    ScaleSamples { x: usize, s: usize },
    MaskSamples { x: usize, mask: Vec<f64> },
    GlobalAvgPool(usize),
    Dense { x: usize, w: usize, b: usize },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize> },
    Sigmoid(usize),
    ColumnDiff(usize),
    Mse { pred: usize, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(CflError::Unsupported(format!(
                "variable {} belongs to tape {}, not tape {}",
                v.index, v.tape, self.id
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let geom = ConvGeom::new(self.nodes[xi].value.shape(), self.nodes[wi].value.shape(), stride)?;
        let out = conv_forward(&geom, self.nodes[xi].value.data(), self.nodes[wi].value.data());
        let value = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(value, Op::Conv { x: xi, w: wi, geom }))
    }

    /// Adds a per-channel bias to a `[N, C, ...]` tensor.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(b)?);
        let xs = self.nodes[xi].value.shape();
        let bv = &self.nodes[bi].value;
        if xs.len() < 2 || bv.shape() != [xs[1]] {
            return Err(structural!("bias shape {:?} does not fit input {:?}", bv.shape(), xs));
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let mut value = self.nodes[xi].value.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bv.data()[(i / inner) % c];
        }
        Ok(self.push(value, Op::ChannelBias { x: xi, b: bi }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let src = &self.nodes[xi].value;
        let data = src.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Relu(xi)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ai].value.add(&self.nodes[bi].value)?;
        Ok(self.push(value, Op::Add(ai, bi)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(structural!("mul: shape {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(ai, bi)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = Tensor::scalar(self.nodes[xi].value.sum());
        Ok(self.push(value, Op::Sum(xi)))
    }

    /// Select channels (axis 1) in the given order.
    pub fn gather_channels(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.gather_axis(1, idx)?;
        Ok(self.push(value, Op::GatherChannels { x: xi, idx: idx.to_vec() }))
    }

    /// Place channels (axis 1) at `idx` inside a zero tensor with `width` channels.
    pub fn scatter_channels(&mut self, x: Var, idx: &[usize], width: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.scatter_axis(1, idx, width)?;
        Ok(self.push(value, Op::ScatterChannels { x: xi, idx: idx.to_vec() }))
    }

    /// Multiplies sample `n` of `x` by `s[n]`.
    pub fn scale_samples(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xi, si) = (self.idx(x)?, self.idx(s)?);
        let (xv, sv) = (&self.nodes[xi].value, &self.nodes[si].value);
        let n = xv.shape()[0];
        if sv.numel() != n {
            return Err(structural!("scale_samples: {} scales for batch of {}", sv.numel(), n));
        }
        let value = scale_rows(xv, sv.data());
        Ok(self.push(value, Op::ScaleSamples { x: xi, s: si }))
    }

    /// Multiplies sample `n` of `x` by the constant `mask[n]`.
    pub fn mask_samples(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if mask.len() != xv.shape()[0] {
            return Err(structural!("mask_samples: {} entries for batch of {}", mask.len(), xv.shape()[0]));
        }
        let value = scale_rows(xv, mask);
        Ok(self.push(value, Op::MaskSamples { x: xi, mask: mask.to_vec() }))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.rank() != 4 {
            return Err(structural!("global_avg_pool expects rank 4, got {:?}", xv.shape()));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let inner = xv.shape()[2] * xv.shape()[3];
        let data = xv.data().chunks(inner).map(|ch| ch.iter().sum::<f64>() / inner as f64).collect();
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(xi)))
    }

    /// `x [N, I] * w[O, I]^T + b[O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xv, wv, bv) = (&self.nodes[xi].value, &self.nodes[wi].value, &self.nodes[bi].value);
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[1] || bv.shape() != [wv.shape()[0]] {
            return Err(structural!(
                "dense: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            ));
        }
        let (n, i, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        gemm(n, i, o, xv.data(), false, wv.data(), true, 1.0, &mut out);
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(value, Op::Dense { x: xi, w: wi, b: bi }))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let lv = &self.nodes[li].value;
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(structural!("cross-entropy: logits {:?} for {} labels", lv.shape(), labels.len()));
        }
        let c = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(structural!("label {} out of range for {} classes", bad, c));
        }
        let mut total = 0.0;
        for (row, &y) in lv.data().chunks(c).zip(labels) {
            total += log_sum_exp(row) - row[y];
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits: li, labels: labels.to_vec() }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let data = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sigmoid(xi)))
    }

    /// `[N, 2] -> [N]`: column 0 minus column 1.
    pub fn column_diff(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.rank() != 2 || xv.shape()[1] != 2 {
            return Err(structural!("column_diff expects [N, 2], got {:?}", xv.shape()));
        }
        let data = xv.data().chunks(2).map(|r| r[0] - r[1]).collect();
        let value = Tensor::new(vec![xv.shape()[0]], data)?;
        Ok(self.push(value, Op::ColumnDiff(xi)))
    }

    /// Mean squared error against a constant target of equal length.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pi = self.idx(pred)?;
        let pv = &self.nodes[pi].value;
        if pv.numel() != target.len() {
            return Err(structural!("mse: {} predictions for {} targets", pv.numel(), target.len()));
        }
        let sq: f64 = pv.data().iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
        let value = Tensor::scalar(sq / target.len() as f64);
        Ok(self.push(value, Op::Mse { pred: pi, target: target.to_vec() }))
    }

    /// Removes the adjoints of `vars` from `adj` (zeros where the loss does
    /// not depend on a variable).
    pub fn take_grads(&self, adj: &mut [Option<Tensor>], vars: &BTreeMap<String, Var>) -> ParamSet {
        vars.iter()
            .map(|(id, v)| {
                let g = adj
                    .get_mut(v.index)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.index].value.shape()));
                (id.clone(), g)
            })
            .collect()
    }

    /// Adjoints of the leaves with respect to the scalar `loss`; interior
    /// adjoints are consumed during propagation and come back as `None`.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(CflError::Unsupported(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; li + 1];
        grads[li] = Some(Tensor::full(self.nodes[li].value.shape(), 1.0));
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, w, geom } => {
                    let (dx, dw) = conv_backward(
                        geom,
                        self.nodes[*x].value.data(),
                        self.nodes[*w].value.data(),
                        g.data(),
                    );
                    accumulate(&mut grads, *x, &self.nodes[*x].value, dx);
                    accumulate(&mut grads, *w, &self.nodes[*w].value, dw);
                }
                Op::ChannelBias { x, b } => {
                    let xs = self.nodes[*x].value.shape();
                    let c = xs[1];
                    let inner: usize = xs[2..].iter().product();
                    let mut db = vec![0.0; c];
                    for (j, v) in g.data().iter().enumerate() {
                        db[(j / inner) % c] += v;
                    }
                    accumulate(&mut grads, *b, &self.nodes[*b].value, db);
                    accumulate(&mut grads, *x, &self.nodes[*x].value, g.into_data());
                }
                Op::Relu(x) => {
                    let xv = self.nodes[*x].value.data();
                    let dx = g.data().iter().zip(xv).map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 }).collect();
                    accumulate(&mut grads, *x, &self.nodes[*x].value, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &self.nodes[*a].value, g.data().to_vec());
                    accumulate(&mut grads, *b, &self.nodes[*b].value, g.into_data());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    let da = g.data().iter().zip(bv).map(|(x, y)| x * y).collect();
                    let db = g.data().iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, &self.nodes[*a].value, da);
                    accumulate(&mut grads, *b, &self.nodes[*b].value, db);
                }
                Op::Sum(x) => {
                    let xv = &self.nodes[*x].value;
                    accumulate(&mut grads, *x, xv, vec![g.data()[0]; xv.numel()]);
                }
                Op::GatherChannels { x, idx } => {
                    let width = self.nodes[*x].value.shape()[1];
                    let dx = scatter_add_axis1(&g, idx, width);
                    accumulate(&mut grads, *x, &self.nodes[*x].value, dx);
                }
                Op::ScatterChannels { x, idx } => {
                    let dx = g.gather_axis(1, idx)?;
                    accumulate(&mut grads, *x, &self.nodes[*x].value, dx.into_data());
                }
                Op::ScaleSamples { x, s } => {
                    let (xv, sv) = (&self.nodes[*x].value, &self.nodes[*s].value);
                    let dx = scale_rows(&g, sv.data()).into_data();
                    let inner = xv.numel() / xv.shape()[0];
                    let ds = g
                        .data()
                        .chunks(inner)
                        .zip(xv.data().chunks(inner))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(&mut grads, *x, xv, dx);
                    accumulate(&mut grads, *s, sv, ds);
                }
                Op::MaskSamples { x, mask } => {
                    let dx = scale_rows(&g, mask).into_data();
                    accumulate(&mut grads, *x, &self.nodes[*x].value, dx);
                }
                Op::GlobalAvgPool(x) => {
                    let xv = &self.nodes[*x].value;
                    let inner = xv.shape()[2] * xv.shape()[3];
                    let mut dx = Vec::with_capacity(xv.numel());
                    for &gv in g.data() {
                        dx.extend(std::iter::repeat_n(gv / inner as f64, inner));
                    }
                    accumulate(&mut grads, *x, xv, dx);
                }
                Op::Dense { x, w, b } => {
                    let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let (n, inp, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                    let mut dx = vec![0.0; n * inp];
                    gemm(n, o, inp, g.data(), false, wv.data(), false, 0.0, &mut dx);
                    let mut dw = vec![0.0; o * inp];
                    gemm(o, n, inp, g.data(), true, xv.data(), false, 0.0, &mut dw);
                    let mut db = vec![0.0; o];
                    for row in g.data().chunks(o) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *x, xv, dx);
                    accumulate(&mut grads, *w, wv, dw);
                    accumulate(&mut grads, *b, &self.nodes[*b].value, db);
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let lv = &self.nodes[*logits].value;
                    let c = lv.shape()[1];
                    let scale = g.data()[0] / labels.len() as f64;
                    let mut dl = Vec::with_capacity(lv.numel());
                    for (row, &y) in lv.data().chunks(c).zip(labels) {
                        let lse = log_sum_exp(row);
                        for (j, &v) in row.iter().enumerate() {
                            let p = (v - lse).exp();
                            dl.push(scale * (p - if j == y { 1.0 } else { 0.0 }));
                        }
                    }
                    accumulate(&mut grads, *logits, lv, dl);
                }
                Op::Sigmoid(x) => {
                    let dx = g.data().iter().zip(node.value.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                    accumulate(&mut grads, *x, &self.nodes[*x].value, dx);
                }
                Op::ColumnDiff(x) => {
                    let dx = g.data().iter().flat_map(|&gv| [gv, -gv]).collect();
                    accumulate(&mut grads, *x, &self.nodes[*x].value, dx);
                }
                Op::Mse { pred, target } => {
                    let pv = &self.nodes[*pred].value;
                    let scale = 2.0 * g.data()[0] / target.len() as f64;
                    let dp = pv.data().iter().zip(target).map(|(p, t)| scale * (p - t)).collect();
                    accumulate(&mut grads, *pred, pv, dp);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], index: usize, like: &Tensor, delta: Vec<f64>) {
    match &mut grads[index] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(like.shape().to_vec(), delta).expect("adjoint matches value shape"));
        }
    }
}

fn scale_rows(x: &Tensor, scales: &[f64]) -> Tensor {
    let inner = x.numel() / x.shape()[0];
    let data = x
        .data()
        .chunks(inner)
        .zip(scales)
        .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn scatter_add_axis1(g: &Tensor, idx: &[usize], width: usize) -> Vec<f64> {
    let shape = g.shape();
    let outer = shape[0];
    let inner: usize = shape[2..].iter().product();
    let mut out = vec![0.0; outer * width * inner];
    for o in 0..outer {
        for (j, &i) in idx.iter().enumerate() {
            let src = (o * idx.len() + j) * inner;
            let dst = (o * width + i) * inner;
            for t in 0..inner {
                out[dst + t] += g.data()[src + t];
            }
        }
    }
    out
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Evaluates `loss_fn` on a fresh tape with every parameter as a leaf and
/// returns `(loss, gradients)` keyed like `params`.
pub fn grad_of<F>(params: &ParamSet, loss_fn: F) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: BTreeMap<String, Var> =
        params.iter().map(|(id, t)| (id.clone(), tape.leaf(t.clone()))).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let loss_value = tape.idx(loss).map(|i| tape.nodes[i].value.data()[0])?;
    let mut adj = tape.backward(loss)?;
    let out = tape.take_grads(&mut adj, &vars);
    Ok((loss_value, out))
}

/// One plain SGD step: `param - lr * grad` for every entry.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
    params.axpy(-lr, grads)
}
