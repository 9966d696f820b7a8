//! Forward kernels shared by the recording graph and the forward-only
//! executor. Both paths call exactly these functions, so their outputs agree
//! bit for bit.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

/// Additive bias applied to attention logits of masked key positions.
pub const MASK_BIAS: f64 = -1e9;

/// Lower/upper clamp for probabilities entering binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

pub(crate) fn dims2<T: Float>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Contract(format!(
            "{op} expects a rank-2 tensor, got shape {:?}",
            t.shape()
        ))),
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · g` where `a` is `[m×k]` and `g` is `[m×n]`.
pub fn matmul_tn_acc<T: Float>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for p in 0..m {
        let g_row = &g[p * n..(p + 1) * n];
        for (i, &av) in a[p * k..(p + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

pub fn transpose_raw<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(Error::dims("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new([m, n], out)
}

pub fn transpose<T: Float>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = dims2("transpose", a)?;
    Tensor::new([c, r], transpose_raw(a.data(), r, c))
}

/// How `b` combines with `a` in [`add`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum AddKind {
    Same,
    RowBroadcast,
}

pub(crate) fn add_kind<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<AddKind> {
    if a.shape() == b.shape() {
        return Ok(AddKind::Same);
    }
    let d = a.last_dim();
    let row_like = match *b.shape() {
        [n] => n == d,
        [1, n] => n == d,
        _ => false,
    };
    if a.rank() >= 1 && row_like {
        Ok(AddKind::RowBroadcast)
    } else {
        Err(Error::dims("add", a.shape(), b.shape()))
    }
}

/// Elementwise sum; `b` may also be a single row broadcast over `a`'s leading axes.
pub fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    match add_kind(a, b)? {
        AddKind::Same => {
            for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        AddKind::RowBroadcast => {
            let d = a.last_dim();
            for row in out.data_mut().chunks_mut(d) {
                for (o, &v) in row.iter_mut().zip(b.data()) {
                    *o += v;
                }
            }
        }
    }
    Ok(out)
}

pub fn mul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::dims("mul", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape(), data)
}

pub fn scale<T: Float>(a: &Tensor<T>, factor: T) -> Tensor<T> {
    a.map(|v| v * factor)
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Index {
            what: "axis",
            index: axis,
            len: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn softmax<T: Float>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

#[inline]
pub fn sigmoid_scalar<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn square<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * v)
}

/// Cached statistics of a layer-norm forward pass.
pub(crate) struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Per-row `γ·(x−μ)/√(var+eps) + β` with population variance.
pub(crate) fn layer_norm_cached<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.last_dim();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::dims("layer_norm", x.shape(), gamma.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let rows = x.outer_len();
    let n = T::lit(d as f64);
    let eps = T::lit(eps);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        rstd.push(inv);
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    Ok((Tensor::new(x.shape(), out)?, LayerNormCache { xhat, rstd }))
}

pub fn layer_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    layer_norm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1−p)`.
pub fn dropout_mask<T: Float>(len: usize, p: f64, rng: &mut Rng) -> Result<Vec<T>> {
    check_dropout_p(p)?;
    let keep = T::lit(1.0 / (1.0 - p));
    Ok((0..len)
        .map(|_| if rng.next_f64() < p { T::zero() } else { keep })
        .collect())
}

pub(crate) fn check_dropout_p(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "dropout probability must be in [0, 1), got {p}"
        )))
    }
}

pub fn embedding<T: Float>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (vocab, d) = dims2("embedding", table)?;
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= vocab {
            return Err(Error::Index {
                what: "embedding table",
                index: id,
                len: vocab,
            });
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new([ids.len(), d], out)
}

pub fn slice_cols<T: Float>(x: &Tensor<T>, start: usize, width: usize) -> Result<Tensor<T>> {
    let (rows, cols) = dims2("slice_cols", x)?;
    if start + width > cols {
        return Err(Error::Index {
            what: "column slice",
            index: start + width,
            len: cols,
        });
    }
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&x.row(r)[start..start + width]);
    }
    Tensor::new([rows, width], out)
}

pub fn concat_cols<T: Float>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_cols of zero tensors".into()))?;
    let (rows, _) = dims2("concat_cols", first)?;
    let mut width = 0;
    for p in parts {
        let (r, c) = dims2("concat_cols", p)?;
        if r != rows {
            return Err(Error::dims("concat_cols", first.shape(), p.shape()));
        }
        width += c;
    }
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::new([rows, width], out)
}

pub fn concat_rows<T: Float>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_rows of zero tensors".into()))?;
    let (_, cols) = dims2("concat_rows", first)?;
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        let (r, c) = dims2("concat_rows", p)?;
        if c != cols {
            return Err(Error::dims("concat_rows", first.shape(), p.shape()));
        }
        rows += r;
        out.extend_from_slice(p.data());
    }
    Tensor::new([rows, cols], out)
}

/// Mean of rows `start..=end`, as a `[1×d]` tensor.
pub fn mean_rows<T: Float>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let (rows, cols) = dims2("mean_rows", x)?;
    if start > end || end >= rows {
        return Err(Error::Span {
            start,
            end,
            len: rows,
        });
    }
    let mut out = vec![T::zero(); cols];
    for r in start..=end {
        for (o, &v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    let count = T::lit((end - start + 1) as f64);
    for o in &mut out {
        *o /= count;
    }
    Tensor::new([1, cols], out)
}

/// Weighted mean binary cross-entropy; entries with zero weight are ignored.
/// Returns the loss and the number of weighted entries.
pub(crate) fn bce<T: Float>(pred: &[T], target: &[T], weight: &[T]) -> (T, T) {
    bce_by(pred.iter().copied(), target, weight)
}

/// [`bce`] of the squared-sigmoid scores of `logits`.
pub(crate) fn squared_sigmoid_bce<T: Float>(logits: &[T], target: &[T], weight: &[T]) -> (T, T) {
    bce_by(
        logits.iter().map(|&l| {
            let s = sigmoid_scalar(l);
            s * s
        }),
        target,
        weight,
    )
}

/// Derivative of the unclamped per-entry loss with respect to the logit:
/// `−2t(1−s) + 2(1−t)s²/(1+s)` with `s = sigmoid(l)`. Bounded and nonzero
/// away from the optimum, even where the score itself is clamped.
pub(crate) fn squared_sigmoid_bce_grad<T: Float>(logit: T, target: T) -> T {
    let s = sigmoid_scalar(logit);
    let two = T::lit(2.0);
    -two * target * (T::one() - s) + two * (T::one() - target) * s * s / (T::one() + s)
}

fn bce_by<T: Float>(pred: impl Iterator<Item = T>, target: &[T], weight: &[T]) -> (T, T) {
    let lo = T::lit(BCE_CLAMP);
    let hi = T::one() - lo;
    let mut total = T::zero();
    let mut count = T::zero();
    for ((p, &t), &w) in pred.zip(target).zip(weight) {
        if w == T::zero() {
            continue;
        }
        let p = p.max(lo).min(hi);
        total += w * -(t * p.ln() + (T::one() - t) * (T::one() - p).ln());
        count += w;
    }
    if count == T::zero() {
        (T::zero(), count)
    } else {
        (total / count, count)
    }
}
