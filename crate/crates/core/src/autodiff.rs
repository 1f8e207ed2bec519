//! Reverse-mode differentiation on a dynamic tape.
//!
//! A [`Graph`] records every op in execution order, so the tape is
//! topologically sorted by construction. [`Graph::backward`] consumes the
//! graph, walks the records once in reverse and returns the gradients.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flops::{FlopCategory, FlopCounter};
use crate::ops::{self, NormStats};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Softmax(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: NormStats<T> },
    MeanAxis { x: Var, axis: usize },
    SelectRows { x: Var, idx: Arc<Vec<usize>> },
    PadRows(Var),
    DwConv { x: Var, k: Var },
    Conv { x: Var, w: Var, stride: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
}

struct Node<T> {
    name: &'static str,
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    flops: FlopCounter,
    category: FlopCategory,
    corrupt: Option<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            flops: FlopCounter::new(),
            category: FlopCategory::Other,
            corrupt: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked("leaf", value, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked("leaf", value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    pub fn flops_mut(&mut self) -> &mut FlopCounter {
        &mut self.flops
    }

    /// Runs `f` with matmul FLOPs attributed to `cat`.
    pub fn with_category<R>(&mut self, cat: FlopCategory, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = std::mem::replace(&mut self.category, cat);
        let out = f(self);
        self.category = prev;
        out
    }

    /// Test fixture: scales the input gradients produced by every `op`
    /// node by 1.01 during backward, so gradient checks must fail.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op: impl Into<String>) {
        self.corrupt = Some(op.into());
    }

    fn push_unchecked(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            name,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(name, value, op, rg))
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .map_err(|_| shape_err("add", self.shape(a), self.shape(b)))?;
        self.push("add", y, Op::Add(a, b), &[a, b])
    }

    /// Adds a `[d]` vector to every last-axis vector of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut y = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in y.data_mut().chunks_mut(d) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.push("add_bias", y, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| shape_err("mul", self.shape(a), self.shape(b)))?;
        self.push("mul", y, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let y = self.value(x).map(|v| v * s);
        self.push("scale", y, Op::Scale(x, s), &[x])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push("sum", y, Op::Sum(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let y = ops::gelu(self.value(x));
        self.push("gelu", y, Op::Gelu(x), &[x])
    }

    // -- products ----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        let plan = ops::matmul_plan(self.shape(a), self.shape(b))?;
        let macs = (plan.pairs.len() * plan.p * plan.q * plan.r) as u64;
        self.flops.add_macs(self.category, macs);
        self.push("matmul", y, Op::Matmul(a, b), &[a, b])
    }

    /// `x · wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let macs = (self.value(x).rows() * self.value(w).numel()) as u64;
        self.flops.add_macs(self.category, macs);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", y, Op::Linear { x, w, b }, &inputs)
    }

    // -- layout ------------------------------------------------------------

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = ops::permute(self.value(x), axes)?;
        self.push(
            "permute",
            y,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        )
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::shape("transpose_last2", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape).map_err(|_| {
            Error::shape("reshape", format!("{:?} -> {:?}", self.shape(x), shape))
        })?;
        self.push("reshape", y, Op::Reshape(x), &[x])
    }

    // -- normalization -----------------------------------------------------

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_lastdim(self.value(x), None)?;
        self.push("softmax", y, Op::Softmax(x), &[x])
    }

    /// Softmax where entries with a `false` mask flag get weight 0.
    pub fn softmax_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let y = ops::softmax_lastdim(self.value(x), Some(mask))?;
        // the backward formula only needs the output, and masked outputs are 0
        self.push("softmax", y, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, stats) =
            ops::layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(
            "layer_norm",
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    // -- reductions and gathers --------------------------------------------

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::mean_axis(self.value(x), axis)?;
        self.push("mean_axis", y, Op::MeanAxis { x, axis }, &[x])
    }

    /// Mean over the token axis of `[L, d]`.
    pub fn mean_pool_tokens(&mut self, x: Var) -> Result<Var> {
        let y = ops::mean_pool_tokens(self.value(x))?;
        self.push("mean_pool_tokens", y, Op::MeanAxis { x, axis: 0 }, &[x])
    }

    /// Rows `idx[j]` of `[R, d]`; indices may repeat. Backward scatter-adds.
    pub fn select_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let y = ops::select_rows(self.value(x), &idx)?;
        self.push("select_rows", y, Op::SelectRows { x, idx }, &[x])
    }

    /// Permutes the rows of `[L, d]`; `idx` must be a bijection.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.shape(x).first().copied().unwrap_or(0);
        ops::check_permutation(idx, rows)?;
        self.select_rows(x, Arc::new(idx.to_vec()))
    }

    pub fn pad_rows(&mut self, x: Var, pad: usize) -> Result<Var> {
        let y = ops::pad_rows(self.value(x), pad)?;
        self.push("pad_rows", y, Op::PadRows(x), &[x])
    }

    // -- convolutions ------------------------------------------------------

    pub fn dwconv2d_3x3(&mut self, x: Var, k: Var) -> Result<Var> {
        let y = ops::dwconv2d_3x3(self.value(x), self.value(k))?;
        self.flops.add_macs(FlopCategory::Conv, (y.numel() * 9) as u64);
        self.push("dwconv2d_3x3", y, Op::DwConv { x, k }, &[x, k])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), stride)?;
        let cin = self.shape(w)[1];
        self.flops
            .add_macs(FlopCategory::Conv, (y.numel() * cin * 9) as u64);
        self.push("conv2d", y, Op::Conv { x, w, stride }, &[x, w])
    }

    // -- loss --------------------------------------------------------------

    /// Mean cross-entropy of `[B, C]` logits; a rank-0 output.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy_logits(self.value(logits), labels)?;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    // -- backward ----------------------------------------------------------

    /// Back-propagates from `root`, seeding its gradient with ones, and frees
    /// the tape.
    pub fn backward(self, root: Var) -> Result<Grads<T>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.nodes[root.0].value.shape()));
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let val = |v: Var| &nodes[v.0].value;
            let mut out: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        out.push((*b, g.clone()));
                    }
                    if needs(*a) {
                        out.push((*a, g));
                    }
                }
                Op::AddBias { x, bias } => {
                    if needs(*bias) {
                        let d = g.last_dim();
                        let mut db = vec![T::zero(); d];
                        for row in g.data().chunks(d) {
                            for (a, &b) in db.iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                        out.push((*bias, Tensor::new(&[d], db)?));
                    }
                    if needs(*x) {
                        out.push((*x, g));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        out.push((*a, g.zip_map(val(*b), |x, y| x * y)?));
                    }
                    if needs(*b) {
                        out.push((*b, g.zip_map(val(*a), |x, y| x * y)?));
                    }
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    out.push((*x, g.map(|v| v * s)));
                }
                Op::Sum(x) => {
                    out.push((*x, Tensor::full(val(*x).shape(), g.data()[0])));
                }
                Op::Matmul(a, b) => {
                    let (da, db) = ops::matmul_backward(val(*a), val(*b), &g, needs(*a), needs(*b))?;
                    out.extend(da.map(|t| (*a, t)));
                    out.extend(db.map(|t| (*b, t)));
                }
                Op::Linear { x, w, b } => {
                    let nb = b.is_some_and(needs);
                    let (dx, dw, db) =
                        ops::linear_backward(val(*x), val(*w), &g, needs(*x), needs(*w), nb);
                    out.extend(dx.map(|t| (*x, t)));
                    out.extend(dw.map(|t| (*w, t)));
                    if let (Some(b), Some(db)) = (b, db) {
                        out.push((*b, db));
                    }
                }
                Op::Permute { x, axes } => {
                    out.push((*x, ops::permute(&g, &ops::inverse_axes(axes))?));
                }
                Op::Reshape(x) => {
                    out.push((*x, g.into_reshaped(val(*x).shape())?));
                }
                Op::Softmax(x) => {
                    out.push((*x, ops::softmax_backward(&node.value, &g)));
                }
                Op::Gelu(x) => {
                    out.push((*x, ops::gelu_backward(val(*x), &g)));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (dx, dg, db) = ops::layer_norm_backward(val(*x), val(*gamma), stats, &g);
                    if needs(*x) {
                        out.push((*x, dx));
                    }
                    if needs(*gamma) {
                        out.push((*gamma, dg));
                    }
                    if needs(*beta) {
                        out.push((*beta, db));
                    }
                }
                Op::MeanAxis { x, axis } => {
                    out.push((*x, ops::mean_axis_backward(val(*x).shape(), *axis, &g)));
                }
                Op::SelectRows { x, idx } => {
                    out.push((*x, ops::select_rows_backward(val(*x).shape(), idx, &g)));
                }
                Op::PadRows(x) => {
                    let n = val(*x).numel();
                    let mut d = g.into_data();
                    d.truncate(n);
                    out.push((*x, Tensor::new(val(*x).shape(), d)?));
                }
                Op::DwConv { x, k } => {
                    let (dx, dk) =
                        ops::dwconv2d_3x3_backward(val(*x), val(*k), &g, needs(*x), needs(*k));
                    out.extend(dx.map(|t| (*x, t)));
                    out.extend(dk.map(|t| (*k, t)));
                }
                Op::Conv { x, w, stride } => {
                    let (dx, dw) =
                        ops::conv2d_backward(val(*x), val(*w), *stride, &g, needs(*x), needs(*w));
                    out.extend(dx.map(|t| (*x, t)));
                    out.extend(dw.map(|t| (*w, t)));
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = probs.last_dim();
                    let scale = g.data()[0] / T::from_usize(labels.len());
                    let mut d = probs.clone();
                    for (row, &l) in d.data_mut().chunks_mut(c).zip(labels) {
                        row[l] -= T::one();
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    out.push((*logits, d));
                }
            }
            let corrupt = self.corrupt.as_deref() == Some(node.name);
            for (v, mut t) in out {
                if !needs(v) {
                    continue;
                }
                if corrupt {
                    t = t.map(|x| x * T::from_f64(1.01));
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::shape(op, format!("{a:?} vs {b:?}"))
}

/// Gradients of the leaves of a consumed [`Graph`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
