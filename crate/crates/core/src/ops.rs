//! Forward and backward kernels on plain tensors.
//!
//! These are the numeric building blocks; [`crate::autodiff::Graph`] records
//! them on a tape. Every reduction runs in a fixed order, so results do not
//! depend on the rayon pool size.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Rows of work below which gemm stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Operand layout for [`gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    /// `c = a · b`, a is `[p, q]`, b is `[q, r]`.
    NN,
    /// `c = a · bᵀ`, a is `[p, q]`, b is `[r, q]`.
    NT,
    /// `c = aᵀ · b`, a is `[q, p]`, b is `[q, r]`.
    TN,
}

/// `c (+)= op(a) · op(b)` for one `[p, r]` output block.
pub(crate) fn gemm<T: Scalar>(
    layout: Layout,
    (p, q, r): (usize, usize, usize),
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(c.len(), p * r);
    if r == 0 {
        return;
    }
    let row = |i: usize, crow: &mut [T]| {
        if !accumulate {
            crow.fill(T::zero());
        }
        match layout {
            Layout::NN => {
                let arow = &a[i * q..(i + 1) * q];
                for (k, &aik) in arow.iter().enumerate() {
                    if aik != T::zero() {
                        axpy(aik, &b[k * r..(k + 1) * r], crow);
                    }
                }
            }
            Layout::NT => {
                let arow = &a[i * q..(i + 1) * q];
                for (j, cij) in crow.iter_mut().enumerate() {
                    *cij += dot(arow, &b[j * q..(j + 1) * q]);
                }
            }
            Layout::TN => {
                for k in 0..q {
                    let aki = a[k * p + i];
                    if aki != T::zero() {
                        axpy(aki, &b[k * r..(k + 1) * r], crow);
                    }
                }
            }
        }
    };
    if p * q * r >= PAR_THRESHOLD && p > 1 {
        c.par_chunks_mut(r)
            .enumerate()
            .for_each(|(i, crow)| row(i, crow));
    } else {
        c.chunks_mut(r).enumerate().for_each(|(i, crow)| row(i, crow));
    }
}

// ---------------------------------------------------------------------------
// matmul with broadcast batch dims

/// Batch pairing for a broadcast matmul: output batch shape and, per output
/// batch, the source batch offsets of each operand.
#[derive(Clone, Debug)]
pub(crate) struct BatchPlan {
    pub out_shape: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
    pub p: usize,
    pub q: usize,
    pub r: usize,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<BatchPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(
            "matmul",
            format!("operands need rank >= 2, got {a:?} and {b:?}"),
        ));
    }
    let (p, q) = (a[a.len() - 2], a[a.len() - 1]);
    let (q2, r) = (b[b.len() - 2], b[b.len() - 1]);
    if q != q2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dims differ: {a:?} x {b:?}"),
        ));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let nd = ab.len().max(bb.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; nd - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (ap, bp) = (pad(ab), pad(bb));
    let mut batch = Vec::with_capacity(nd);
    for (&x, &y) in ap.iter().zip(&bp) {
        if x != y && x != 1 && y != 1 {
            return Err(Error::shape(
                "matmul",
                format!("batch dims not broadcastable: {a:?} x {b:?}"),
            ));
        }
        batch.push(if x == 1 { y } else { x });
    }
    let strides = |s: &[usize]| -> Vec<usize> {
        let mut st = vec![0; nd];
        let mut acc = 1;
        for d in (0..nd).rev() {
            st[d] = if s[d] == 1 { 0 } else { acc };
            acc *= s[d];
        }
        st
    };
    let (sa, sb) = (strides(&ap), strides(&bp));
    let total: usize = batch.iter().product();
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        let oa: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ob: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        pairs.push((oa, ob));
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let mut out_shape = batch;
    out_shape.extend_from_slice(&[p, r]);
    Ok(BatchPlan {
        out_shape,
        pairs,
        p,
        q,
        r,
    })
}

/// Batched matrix product `a[.., p, q] · b[.., q, r]` with broadcast batch dims.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let (p, q, r) = (plan.p, plan.q, plan.r);
    let mut out = Tensor::zeros(&plan.out_shape);
    let od = out.data_mut();
    for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
        gemm(
            Layout::NN,
            (p, q, r),
            &a.data()[ia * p * q..(ia + 1) * p * q],
            &b.data()[ib * q * r..(ib + 1) * q * r],
            &mut od[o * p * r..(o + 1) * p * r],
            false,
        );
    }
    Ok(out)
}

pub(crate) fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let (p, q, r) = (plan.p, plan.q, plan.r);
    let dcd = dc.data();
    let da = need_a.then(|| {
        let mut da = Tensor::zeros(a.shape());
        let dad = da.data_mut();
        for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
            // dA = dC · Bᵀ
            gemm(
                Layout::NT,
                (p, r, q),
                &dcd[o * p * r..(o + 1) * p * r],
                &b.data()[ib * q * r..(ib + 1) * q * r],
                &mut dad[ia * p * q..(ia + 1) * p * q],
                true,
            );
        }
        da
    });
    let db = need_b.then(|| {
        let mut db = Tensor::zeros(b.shape());
        let dbd = db.data_mut();
        for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
            // dB = Aᵀ · dC
            gemm(
                Layout::TN,
                (q, p, r),
                &a.data()[ia * p * q..(ia + 1) * p * q],
                &dcd[o * p * r..(o + 1) * p * r],
                &mut dbd[ib * q * r..(ib + 1) * q * r],
                true,
            );
        }
        db
    });
    Ok((da, db))
}

/// `x · wᵀ + bias` over the last axis; `w` is `[out, in]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if w.rank() != 2 || x.rank() == 0 || x.last_dim() != w.shape()[1] {
        return Err(Error::shape(
            "linear",
            format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
        ));
    }
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    if let Some(b) = bias {
        if b.shape() != [out_dim] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} for {out_dim} outputs", b.shape()),
            ));
        }
    }
    let rows = x.rows();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    let mut out = Tensor::zeros(&shape);
    gemm(
        Layout::NT,
        (rows, in_dim, out_dim),
        x.data(),
        w.data(),
        out.data_mut(),
        false,
    );
    if let Some(b) = bias {
        for row in out.data_mut().chunks_mut(out_dim) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Ok(out)
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let rows = x.rows();
    let dx = need_x.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        gemm(
            Layout::NN,
            (rows, out_dim, in_dim),
            dy.data(),
            w.data(),
            dx.data_mut(),
            false,
        );
        dx
    });
    let dw = need_w.then(|| {
        let mut dw = Tensor::zeros(w.shape());
        gemm(
            Layout::TN,
            (out_dim, rows, in_dim),
            dy.data(),
            x.data(),
            dw.data_mut(),
            false,
        );
        dw
    });
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); out_dim];
        for row in dy.data().chunks(out_dim) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        Tensor::new(&[out_dim], db).expect("bias grad shape")
    });
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// layout ops

pub(crate) fn check_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return Err(Error::shape(
            "permute",
            format!("axes {axes:?} for rank {}", shape.len()),
        ));
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return Err(Error::shape("permute", format!("bad axes {axes:?}")));
        }
        seen[a] = true;
    }
    Ok(())
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    check_axes(x.shape(), axes)?;
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        let src = x.data();
        // innermost axis copied in a tight loop
        let inner = out_shape[rank - 1];
        let inner_stride = strides[rank - 1];
        let mut idx = vec![0usize; rank];
        let mut base = 0usize;
        for _ in 0..n / inner {
            if inner_stride == 1 {
                out.extend_from_slice(&src[base..base + inner]);
            } else {
                out.extend((0..inner).map(|j| src[base + j * inner_stride]));
            }
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                base += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                base -= strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Swaps the last two axes.
pub fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::shape("transpose_last2", "rank < 2"));
    }
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 2, r - 1);
    permute(x, &axes)
}

// ---------------------------------------------------------------------------
// elementwise and normalizations

/// Softmax over the last axis with max subtraction. With a mask, entries
/// whose flag is `false` get weight 0; a row with no kept entries is all 0.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if x.rank() == 0 || d == 0 {
        return Err(Error::shape("softmax", "last dim must be >= 1"));
    }
    if let Some(m) = mask {
        if m.len() != x.numel() {
            return Err(Error::shape(
                "softmax",
                format!("mask of {} for {} elements", m.len(), x.numel()),
            ));
        }
    }
    let mut out = x.clone();
    for (ri, row) in out.data_mut().chunks_mut(d).enumerate() {
        let keep = |j: usize| mask.map_or(true, |m| m[ri * d + j]);
        let mut mx = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > mx {
                mx = v;
            }
        }
        if mx == T::neg_infinity() {
            row.fill(T::zero());
            continue;
        }
        let mut s = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            *v = if keep(j) { (*v - mx).exp() } else { T::zero() };
            s += *v;
        }
        let inv = T::one() / s;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let d = y.last_dim();
    let mut dx = Tensor::zeros(y.shape());
    for ((dxr, yr), dyr) in dx
        .data_mut()
        .chunks_mut(d)
        .zip(y.data().chunks(d))
        .zip(dy.data().chunks(d))
    {
        let s: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o = yv * (g - s);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, a, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
    x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

pub(crate) fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (c, a, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
    let three = T::from_f64(3.0);
    x.zip_map(dy, |v, g| {
        let t = (c * (v + a * v * v * v)).tanh();
        let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
        g * (half * (T::one() + t) + half * v * dt)
    })
    .expect("gelu backward shapes")
}

/// Saved statistics of a layer norm forward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes each last-axis vector to zero mean and unit variance, then
/// applies `gamma` and `beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_with_stats<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let d = x.last_dim();
    if x.rank() == 0 || d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "input {:?}, gamma {:?}, beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let rows = x.rows();
    let inv_d = T::one() / T::from_usize(d);
    let eps = T::from_f64(eps);
    let mut y = Tensor::zeros(x.shape());
    let mut stats = NormStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for (xr, yr) in x.data().chunks(d).zip(y.data_mut().chunks_mut(d)) {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for (((o, &v), &g), &b) in yr.iter_mut().zip(xr).zip(gamma.data()).zip(beta.data()) {
            *o = (v - mean) * rstd * g + b;
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((y, stats))
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = x.last_dim();
    let inv_d = T::one() / T::from_usize(d);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for (r, ((xr, dyr), dxr)) in x
        .data()
        .chunks(d)
        .zip(dy.data().chunks(d))
        .zip(dx.data_mut().chunks_mut(d))
        .enumerate()
    {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..d {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = dyr[j] * gamma.data()[j];
            dgamma[j] += dyr[j] * xhat[j];
            dbeta[j] += dyr[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for j in 0..d {
            dxr[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
    (
        dx,
        Tensor::new(&[d], dgamma).expect("gamma grad"),
        Tensor::new(&[d], dbeta).expect("beta grad"),
    )
}

// ---------------------------------------------------------------------------
// reductions

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Arithmetic mean over one axis; that axis is removed from the shape.
pub fn mean_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape(
            "mean_axis",
            format!("axis {axis} for shape {:?}", x.shape()),
        ));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    if n == 0 {
        return Err(Error::shape("mean_axis", "cannot average over an empty axis"));
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    let mut out = vec![T::zero(); outer * inner];
    let inv = T::one() / T::from_usize(n);
    let src = x.data();
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for k in 0..n {
            let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(&shape, out)
}

pub(crate) fn mean_axis_backward<T: Scalar>(
    in_shape: &[usize],
    axis: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (outer, n, inner) = axis_split(in_shape, axis);
    let inv = T::one() / T::from_usize(n);
    let mut dx = Tensor::zeros(in_shape);
    let dxd = dx.data_mut();
    for o in 0..outer {
        let g = &dy.data()[o * inner..(o + 1) * inner];
        for k in 0..n {
            let dst = &mut dxd[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(g) {
                *d = v * inv;
            }
        }
    }
    dx
}

/// Mean over the token axis of a `[L, d]` tensor.
pub fn mean_pool_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape(
            "mean_pool_tokens",
            format!("expected [L, d], got {:?}", x.shape()),
        ));
    }
    mean_axis(x, 0)
}

// ---------------------------------------------------------------------------
// row gathers

/// Rows `idx[j]` of a `[R, d]` tensor, in order. Indices may repeat.
pub fn select_rows<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape(
            "select_rows",
            format!("expected [R, d], got {:?}", x.shape()),
        ));
    }
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        if i >= rows {
            return Err(Error::index(
                "select_rows",
                format!("row {i} out of range for {rows} rows"),
            ));
        }
        out.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(&[idx.len(), d], out)
}

pub(crate) fn select_rows_backward<T: Scalar>(
    in_shape: &[usize],
    idx: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let d = in_shape[1];
    let mut dx = Tensor::zeros(in_shape);
    let dxd = dx.data_mut();
    for (j, &i) in idx.iter().enumerate() {
        for (a, &b) in dxd[i * d..(i + 1) * d]
            .iter_mut()
            .zip(&dy.data()[j * d..(j + 1) * d])
        {
            *a += b;
        }
    }
    dx
}

/// Checks that `idx` is a permutation of `0..n`.
pub fn check_permutation(idx: &[usize], n: usize) -> Result<()> {
    if idx.len() != n {
        return Err(Error::index(
            "gather_rows",
            format!("permutation of length {} for {n} rows", idx.len()),
        ));
    }
    let mut seen = vec![false; n];
    for &i in idx {
        if i >= n {
            return Err(Error::index("gather_rows", format!("index {i} out of range")));
        }
        if seen[i] {
            return Err(Error::index("gather_rows", format!("index {i} repeated")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Row `j` of the output is row `idx[j]` of the input; `idx` must be a
/// bijection on `0..L`.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape(
            "gather_rows",
            format!("expected [L, d], got {:?}", x.shape()),
        ));
    }
    check_permutation(idx, x.shape()[0])?;
    select_rows(x, idx)
}

/// Appends `pad` zero rows to a `[R, d]` tensor.
pub fn pad_rows<T: Scalar>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape(
            "pad_rows",
            format!("expected [R, d], got {:?}", x.shape()),
        ));
    }
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    let mut data = x.data().to_vec();
    data.resize((rows + pad) * d, T::zero());
    Tensor::new(&[rows + pad, d], data)
}

// ---------------------------------------------------------------------------
// convolutions, zero padding 1

/// Splits `[C, H, W]` or `[B, C, H, W]` into `(B, C, H, W)`.
pub(crate) fn spatial_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected [C, H, W] or [B, C, H, W], got {shape:?}"),
        )),
    }
}

fn dw_check<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let dims = spatial_dims("dwconv2d_3x3", x.shape())?;
    if k.shape() != [dims.1, 3, 3] {
        return Err(Error::shape(
            "dwconv2d_3x3",
            format!("kernels {:?} for {} channels", k.shape(), dims.1),
        ));
    }
    Ok(dims)
}

/// Depthwise 3×3 cross-correlation with zero padding 1.
pub fn dwconv2d_3x3<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = dw_check(x, k)?;
    let mut out = Tensor::zeros(x.shape());
    let (src, dst, kd) = (x.data(), out.data_mut(), k.data());
    for plane in 0..b * c {
        let ch = plane % c;
        let xs = &src[plane * h * w..(plane + 1) * h * w];
        let ys = &mut dst[plane * h * w..(plane + 1) * h * w];
        let kk = &kd[ch * 9..ch * 9 + 9];
        for ky in 0..3 {
            for kx in 0..3 {
                let kv = kk[ky * 3 + kx];
                if kv == T::zero() {
                    continue;
                }
                // output (y, x) reads input (y + ky - 1, x + kx - 1)
                let y0 = if ky == 0 { 1 } else { 0 };
                let y1 = if ky == 2 { h.saturating_sub(1) } else { h };
                let x0 = if kx == 0 { 1 } else { 0 };
                let x1 = if kx == 2 { w.saturating_sub(1) } else { w };
                for y in y0..y1 {
                    let iy = y + ky - 1;
                    for xx in x0..x1 {
                        ys[y * w + xx] += kv * xs[iy * w + xx + kx - 1];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn dwconv2d_3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    dy: &Tensor<T>,
    need_x: bool,
    need_k: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (b, c, h, w) = dw_check(x, k).expect("checked in forward");
    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut dk = need_k.then(|| Tensor::zeros(k.shape()));
    for plane in 0..b * c {
        let ch = plane % c;
        let xs = &x.data()[plane * h * w..(plane + 1) * h * w];
        let gs = &dy.data()[plane * h * w..(plane + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let y0 = if ky == 0 { 1 } else { 0 };
                let y1 = if ky == 2 { h.saturating_sub(1) } else { h };
                let x0 = if kx == 0 { 1 } else { 0 };
                let x1 = if kx == 2 { w.saturating_sub(1) } else { w };
                let kv = k.data()[ch * 9 + ky * 3 + kx];
                let mut acc = T::zero();
                for y in y0..y1 {
                    let iy = y + ky - 1;
                    for xx in x0..x1 {
                        let g = gs[y * w + xx];
                        let ii = iy * w + xx + kx - 1;
                        acc += g * xs[ii];
                        if let Some(dx) = dx.as_mut() {
                            dx.data_mut()[plane * h * w + ii] += g * kv;
                        }
                    }
                }
                if let Some(dk) = dk.as_mut() {
                    dk.data_mut()[ch * 9 + ky * 3 + kx] += acc;
                }
            }
        }
    }
    (dx, dk)
}

/// Output extent of a 3×3, padding-1 convolution.
pub fn conv_out_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

fn conv_geom<T: Scalar>(x: &Tensor<T>, wt: &Tensor<T>, stride: usize) -> Result<ConvGeom> {
    let (b, cin, h, w) = spatial_dims("conv2d", x.shape())?;
    if !(1..=2).contains(&stride) {
        return Err(Error::invalid(format!("conv2d stride must be 1 or 2, got {stride}")));
    }
    match *wt.shape() {
        [cout, ci, 3, 3] if ci == cin => Ok(ConvGeom {
            b,
            cin,
            h,
            w,
            cout,
            ho: conv_out_extent(h, stride),
            wo: conv_out_extent(w, stride),
            stride,
        }),
        _ => Err(Error::shape(
            "conv2d",
            format!("weight {:?} for input {:?}", wt.shape(), x.shape()),
        )),
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, xs: &[T], cols: &mut [T]) {
    let p = g.ho * g.wo;
    for ci in 0..g.cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..((ci * 9) + ky * 3 + kx + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        row[oy * g.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            xs[(ci * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.ho * g.wo;
    for ci in 0..g.cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * p..((ci * 9) + ky * 3 + kx + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[(ci * g.h + iy as usize) * g.w + ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_out_shape(x_rank: usize, g: &ConvGeom) -> Vec<usize> {
    if x_rank == 3 {
        vec![g.cout, g.ho, g.wo]
    } else {
        vec![g.b, g.cout, g.ho, g.wo]
    }
}

/// 3×3 cross-correlation with zero padding 1 and stride 1 or 2.
/// `w` is `[C_out, C_in, 3, 3]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let g = conv_geom(x, w, stride)?;
    let p = g.ho * g.wo;
    let mut out = Tensor::zeros(&conv_out_shape(x.rank(), &g));
    let mut cols = vec![T::zero(); g.cin * 9 * p];
    for bi in 0..g.b {
        im2col(&g, &x.data()[bi * g.cin * g.h * g.w..(bi + 1) * g.cin * g.h * g.w], &mut cols);
        gemm(
            Layout::NN,
            (g.cout, g.cin * 9, p),
            w.data(),
            &cols,
            &mut out.data_mut()[bi * g.cout * p..(bi + 1) * g.cout * p],
            false,
        );
    }
    Ok(out)
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    dy: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = conv_geom(x, w, stride).expect("checked in forward");
    let p = g.ho * g.wo;
    let kdim = g.cin * 9;
    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_w.then(|| Tensor::zeros(w.shape()));
    let mut cols = vec![T::zero(); kdim * p];
    for bi in 0..g.b {
        let gy = &dy.data()[bi * g.cout * p..(bi + 1) * g.cout * p];
        if let Some(dw) = dw.as_mut() {
            im2col(&g, &x.data()[bi * g.cin * g.h * g.w..(bi + 1) * g.cin * g.h * g.w], &mut cols);
            gemm(Layout::NT, (g.cout, p, kdim), gy, &cols, dw.data_mut(), true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(Layout::TN, (kdim, g.cout, p), w.data(), gy, &mut cols, false);
            col2im(
                &g,
                &cols,
                &mut dx.data_mut()[bi * g.cin * g.h * g.w..(bi + 1) * g.cin * g.h * g.w],
            );
        }
    }
    (dx, dw)
}

// ---------------------------------------------------------------------------
// loss

/// Mean cross-entropy of `[B, C]` logits against class ids. Returns the loss
/// and the softmax probabilities.
pub fn cross_entropy_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} for {} labels", logits.shape(), labels.len()),
        ));
    }
    let c = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::index(
            "cross_entropy",
            format!("label {bad} for {c} classes"),
        ));
    }
    let probs = softmax_lastdim(logits, None)?;
    let mut loss = T::zero();
    for (row, &l) in logits.data().chunks(c).zip(labels) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        loss += lse - row[l];
    }
    Ok((loss / T::from_usize(labels.len()), probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn naive_matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
        let mut c = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                for k in 0..q {
                    c[i * r + j] += a[i * q + k] * b[k * r + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i = Tensor::<f64>::eye(2);
        let a = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&i, &a).unwrap(), a);
        let x = Tensor::<f64>::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let y = Tensor::<f64>::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&x, &y).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = seeded(3);
        let a = Tensor::<f64>::rand_uniform(&[5, 7], -2.0, 2.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[7, 3], -2.0, 2.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        let want = naive_matmul(a.data(), b.data(), 5, 7, 3);
        for (x, y) in c.data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_broadcasts_batch_dims() {
        let mut rng = seeded(4);
        let a = Tensor::<f64>::rand_uniform(&[2, 1, 3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[3, 4, 2], -1.0, 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                let want = naive_matmul(
                    &a.data()[i * 12..(i + 1) * 12],
                    &b.data()[j * 8..(j + 1) * 8],
                    3,
                    4,
                    2,
                );
                let got = &c.data()[(i * 3 + j) * 6..(i * 3 + j + 1) * 6];
                for (x, y) in got.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
        let bad = Tensor::<f64>::zeros(&[2, 5, 2]);
        assert!(matmul(&a, &bad).is_err());
    }

    #[test]
    fn softmax_examples() {
        let z = Tensor::<f64>::zeros(&[3]);
        for v in softmax_lastdim(&z, None).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = Tensor::<f64>::from_f64(&[2], &[1000.0, 0.0]).unwrap();
        let s = softmax_lastdim(&big, None).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
        let mut rng = seeded(5);
        let r = Tensor::<f64>::rand_uniform(&[4, 6], -3.0, 3.0, &mut rng);
        let s = softmax_lastdim(&r, None).unwrap();
        for row in s.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        let mask = [true, true, false, false, false, false];
        let s = softmax_lastdim(&x, Some(&mask)).unwrap();
        let want = softmax_lastdim(&Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap(), None).unwrap();
        assert!((s.data()[0] - want.data()[0]).abs() < 1e-15);
        assert_eq!(s.data()[2], 0.0);
        assert_eq!(&s.data()[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_pool_examples() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(mean_pool_tokens(&x).unwrap().data(), &[2.0, 2.0]);
        let one = Tensor::<f64>::from_rows(&[vec![5.0, 7.0]]).unwrap();
        assert_eq!(mean_pool_tokens(&one).unwrap().data(), &[5.0, 7.0]);
        assert!(mean_pool_tokens(&Tensor::<f64>::zeros(&[0, 2])).is_err());

        let mut rng = seeded(6);
        let r = Tensor::<f64>::rand_uniform(&[16, 4], -2.0, 2.0, &mut rng);
        let m = mean_pool_tokens(&r).unwrap();
        for j in 0..4 {
            let mut s = 0.0;
            for i in 0..16 {
                s += r.get(&[i, j]);
            }
            assert!((m.data()[j] - s / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_rows_examples() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(gather_rows(&x, &[2, 0, 1]).unwrap().data(), &[3.0, 1.0, 2.0]);
        assert_eq!(gather_rows(&x, &[0, 1, 2]).unwrap(), x);
        let idx = [2, 0, 1];
        let inv = crate::sec::invert_permutation(&idx);
        let back = gather_rows(&gather_rows(&x, &idx).unwrap(), &inv).unwrap();
        assert_eq!(back, x);
        assert!(gather_rows(&x, &[0, 0, 1]).is_err());
        assert!(gather_rows(&x, &[0, 1, 3]).is_err());
        assert!(gather_rows(&x, &[0, 1]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::<f64>::ones(&[4]);
        let b = Tensor::<f64>::zeros(&[4]);
        let c = Tensor::<f64>::full(&[4], 3.0);
        assert!(layer_norm(&c, &g, &b, 1e-6).unwrap().data().iter().all(|v| v.abs() < 1e-12));

        let g2 = Tensor::<f64>::ones(&[2]);
        let b2 = Tensor::<f64>::zeros(&[2]);
        let x = Tensor::<f64>::from_f64(&[2], &[1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &g2, &b2, 1e-6).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6 && (y.data()[1] + 1.0).abs() < 1e-6);

        let mut rng = seeded(7);
        let r = Tensor::<f64>::rand_uniform(&[3, 8], -2.0, 2.0, &mut rng);
        let y = layer_norm(&r, &Tensor::ones(&[8]), &Tensor::zeros(&[8]), 1e-6).unwrap();
        for (row, xr) in y.data().chunks(8).zip(r.data().chunks(8)) {
            let stat = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / 8.0;
                (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 8.0)
            };
            let (mean, var) = stat(row);
            let (_, raw_var) = stat(xr);
            assert!(mean.abs() < 1e-6);
            // eps in the denominator shrinks the variance by eps / raw_var
            assert!((var - 1.0).abs() <= 1e-6 / raw_var + 1e-12);
        }
    }

    fn naive_dwconv(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = Tensor::zeros(x.shape());
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            let ix = xx as isize + kx as isize - 1;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                s += k.get(&[ch, ky, kx]) * x.get(&[ch, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out.data_mut()[(ch * h + y) * w + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn dwconv_examples() {
        let mut rng = seeded(8);
        let x = Tensor::<f64>::rand_uniform(&[2, 5, 5], -2.0, 2.0, &mut rng);
        let mut delta = Tensor::<f64>::zeros(&[2, 3, 3]);
        delta.data_mut()[4] = 1.0;
        delta.data_mut()[13] = 1.0;
        assert_eq!(dwconv2d_3x3(&x, &delta).unwrap(), x);

        let ones = Tensor::<f64>::ones(&[1, 3, 3]);
        let y = dwconv2d_3x3(&ones, &ones).unwrap();
        assert_eq!(y.get(&[0, 1, 1]), 9.0);
        assert_eq!(y.get(&[0, 0, 0]), 4.0);

        let k = Tensor::<f64>::rand_uniform(&[2, 3, 3], -2.0, 2.0, &mut rng);
        let got = dwconv2d_3x3(&x, &k).unwrap();
        assert!(got.max_abs_diff(&naive_dwconv(&x, &k)) < 1e-12);
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, s: usize) -> Tensor<f64> {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cout = w.shape()[0];
        let (ho, wo) = (h.div_ceil(s), wd.div_ceil(s));
        let mut out = Tensor::zeros(&[cout, ho, wo]);
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * s + ky) as isize - 1;
                                let ix = (ox * s + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.get(&[co, ci, ky, kx]) * x.get(&[ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    out.data_mut()[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_examples() {
        let x = Tensor::<f64>::from_f64(&[1, 4, 4], &(0..16).map(f64::from).collect::<Vec<_>>()).unwrap();
        let mut delta = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0;
        let y = conv2d(&x, &delta, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[0.0, 2.0, 8.0, 10.0]);

        // two output channels, each fed by one input channel through a delta
        let mut rng = seeded(9);
        let x2 = Tensor::<f64>::rand_uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
        let mut w = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        w.data_mut()[(0 * 2 + 1) * 9 + 4] = 1.0;
        w.data_mut()[(1 * 2 + 0) * 9 + 4] = 1.0;
        let y2 = conv2d(&x2, &w, 1).unwrap();
        assert_eq!(&y2.data()[..9], &x2.data()[9..]);
        assert_eq!(&y2.data()[9..], &x2.data()[..9]);

        for s in [1, 2] {
            let x = Tensor::<f64>::rand_uniform(&[3, 7, 6], -2.0, 2.0, &mut rng);
            let w = Tensor::<f64>::rand_uniform(&[4, 3, 3, 3], -2.0, 2.0, &mut rng);
            assert!(conv2d(&x, &w, s).unwrap().max_abs_diff(&naive_conv(&x, &w, s)) < 1e-12);
        }
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), 1).is_err());
        assert!(conv2d(&x, &delta, 3).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = seeded(10);
        let x = Tensor::<f64>::rand_uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let axes = [2, 0, 3, 1];
        let y = permute(&x, &axes).unwrap();
        assert_eq!(y.shape(), &[4, 2, 5, 3]);
        assert_eq!(y.get(&[3, 1, 4, 2]), x.get(&[1, 2, 3, 4]));
        assert_eq!(permute(&y, &inverse_axes(&axes)).unwrap(), x);
        let t = transpose_last2(&Tensor::<f64>::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(t.shape(), &[2, 1]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let z = Tensor::<f64>::zeros(&[2, 4]);
        let (loss, _) = cross_entropy_logits(&z, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy_logits(&z, &[0, 4]).is_err());
    }
}
