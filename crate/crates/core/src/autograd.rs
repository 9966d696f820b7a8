//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into the leaves that require them; repeated calls add up until
//! [`Graph::zero_grad`].

use crate::error::{Error, Result};
use crate::kernels::{self, AddKind};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, AddKind),
    Mul(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows {
        x: Var,
        start: usize,
        end: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        pred: Var,
        target: Vec<T>,
        weight: Vec<T>,
        count: T,
    },
    SquaredSigmoidBce {
        logits: Var,
        target: Vec<T>,
        weight: Vec<T>,
        count: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf (or of the last backward root).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = kernels::add_kind(self.value(a), self.value(b))?;
        let value = kernels::add(self.value(a), self.value(b))?;
        Ok(self.derived(value, Op::Add(a, b, kind), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let factor = T::lit(factor);
        let value = kernels::scale(self.value(a), factor);
        self.derived(value, Op::Scale(a, factor), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = kernels::transpose(self.value(a))?;
        Ok(self.derived(value, Op::Transpose(a), &[a]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = kernels::softmax(self.value(x), axis)?;
        Ok(self.derived(value, Op::Softmax { x, axis }, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = kernels::sigmoid(self.value(x));
        self.derived(value, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = kernels::relu(self.value(x));
        self.derived(value, Op::Relu(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = kernels::square(self.value(x));
        self.derived(value, Op::Square(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, cache) =
            kernels::layer_norm_cached(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: cache.xhat,
            rstd: cache.rstd,
        };
        Ok(self.derived(value, op, &[x, gamma, beta]))
    }

    /// Inverted dropout. Without an rng (inference) this is the identity and
    /// records nothing.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var> {
        kernels::check_dropout_p(p)?;
        let rng = match rng {
            Some(r) if p > 0.0 => r,
            _ => return Ok(x),
        };
        let mask = kernels::dropout_mask::<T>(self.value(x).len(), p, rng)?;
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(src.shape(), data)?;
        Ok(self.derived(value, Op::Dropout { x, mask }, &[x]))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = kernels::embedding(self.value(table), ids)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.derived(value, op, &[table]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let value = kernels::slice_cols(self.value(x), start, width)?;
        Ok(self.derived(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let value = kernels::concat_cols(&tensors)?;
        Ok(self.derived(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let value = kernels::concat_rows(&tensors)?;
        Ok(self.derived(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Mean of rows `start..=end` as a `[1×d]` row.
    pub fn mean_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = kernels::mean_rows(self.value(x), start, end)?;
        Ok(self.derived(value, Op::MeanRows { x, start, end }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.derived(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let total: T = src.data().iter().copied().sum();
        let value = Tensor::scalar(total / T::lit(src.len().max(1) as f64));
        self.derived(value, Op::Mean(x), &[x])
    }

    /// Mean binary cross-entropy of probabilities `pred` against `target`,
    /// over entries whose `weight` is nonzero.
    pub fn bce(&mut self, pred: Var, target: Vec<T>, weight: Vec<T>) -> Result<Var> {
        let n = self.value(pred).len();
        if target.len() != n || weight.len() != n {
            return Err(Error::Contract(format!(
                "bce: {n} predictions vs {} targets and {} weights",
                target.len(),
                weight.len()
            )));
        }
        let (loss, count) = kernels::bce(self.value(pred).data(), &target, &weight);
        let op = Op::Bce {
            pred,
            target,
            weight,
            count,
        };
        Ok(self.derived(Tensor::scalar(loss), op, &[pred]))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)²` against `target`, over
    /// entries whose `weight` is nonzero. The forward value clamps scores like
    /// [`Graph::bce`]; the gradient is taken in logit space and does not vanish
    /// for clamped entries.
    pub fn squared_sigmoid_bce(&mut self, logits: Var, target: Vec<T>, weight: Vec<T>) -> Result<Var> {
        let n = self.value(logits).len();
        if target.len() != n || weight.len() != n {
            return Err(Error::Contract(format!(
                "squared_sigmoid_bce: {n} logits vs {} targets and {} weights",
                target.len(),
                weight.len()
            )));
        }
        let (loss, count) = kernels::squared_sigmoid_bce(self.value(logits).data(), &target, &weight);
        let op = Op::SquaredSigmoidBce {
            logits,
            target,
            weight,
            count,
        };
        Ok(self.derived(Tensor::scalar(loss), op, &[logits]))
    }

    /// Reverse pass from a scalar `loss`. Gradients are added to whatever the
    /// leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut work: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        work.resize_with(loss.0 + 1, || None);
        work[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = work[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                accumulate(&mut self.grads[id], &g);
                continue;
            }
            if id == loss.0 {
                accumulate(&mut self.grads[id], &g);
            }
            self.propagate(id, &g, &mut work)?;
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], work: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        // Binds the gradient buffer of `$v` when it participates in differentiation.
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:expr) => {
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let len = nodes[v.0].value.len();
                    let $buf: &mut Vec<T> = work[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                    $body
                }
            };
        }

        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = kernels::dims2("matmul", val(*a))?;
                let n = val(*b).shape()[1];
                with_grad!(*a, |ga| {
                    let bt = kernels::transpose_raw(val(*b).data(), k, n);
                    kernels::matmul_acc(g, &bt, m, n, k, ga);
                });
                with_grad!(*b, |gb| kernels::matmul_tn_acc(val(*a).data(), g, m, k, n, gb));
            }
            Op::Add(a, b, kind) => {
                with_grad!(*a, |ga| add_into(ga, g));
                with_grad!(*b, |gb| match kind {
                    AddKind::Same => add_into(gb, g),
                    AddKind::RowBroadcast => {
                        for row in g.chunks(gb.len()) {
                            add_into(gb, row);
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                with_grad!(*a, |ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(a, factor) => {
                with_grad!(*a, |ga| {
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += gi * *factor;
                    }
                });
            }
            Op::Transpose(a) => {
                let shape = nodes[id].value.shape();
                let gt = kernels::transpose_raw(g, shape[0], shape[1]);
                with_grad!(*a, |ga| add_into(ga, &gt));
            }
            Op::Softmax { x, axis } => {
                let y = nodes[id].value.data();
                let (outer, len, inner) = kernels::axis_split(nodes[id].value.shape(), *axis)?;
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = nodes[id].value.data();
                with_grad!(*x, |gx| {
                    for ((o, &gi), &s) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * s * (T::one() - s);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                with_grad!(*x, |gx| {
                    for ((o, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x).data();
                with_grad!(*x, |gx| {
                    for ((o, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += T::lit(2.0) * v * gi;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).len();
                with_grad!(*gamma, |gg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                with_grad!(*beta, |gb| {
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                });
                let gam = val(*gamma).data();
                let n = T::lit(d as f64);
                with_grad!(*x, |gx| {
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_g = T::zero();
                        let mut mean_gh = T::zero();
                        for j in 0..d {
                            let gh = grow[j] * gam[j];
                            mean_g += gh;
                            mean_gh += gh * hrow[j];
                        }
                        mean_g /= n;
                        mean_gh /= n;
                        for j in 0..d {
                            let gh = grow[j] * gam[j];
                            gx[r * d + j] += rstd[r] * (gh - mean_g - hrow[j] * mean_gh);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                with_grad!(*x, |gx| {
                    for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).last_dim();
                with_grad!(*table, |gt| {
                    for (row, &tok) in g.chunks(d).zip(ids) {
                        add_into(&mut gt[tok * d..(tok + 1) * d], row);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let cols = val(*x).last_dim();
                let width = nodes[id].value.last_dim();
                with_grad!(*x, |gx| {
                    for (r, row) in g.chunks(width).enumerate() {
                        add_into(&mut gx[r * cols + start..r * cols + start + width], row);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = nodes[id].value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let width = val(p).last_dim();
                    with_grad!(p, |gp| {
                        for (r, row) in gp.chunks_mut(width).enumerate() {
                            add_into(row, &g[r * total + offset..r * total + offset + width]);
                        }
                    });
                    offset += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    with_grad!(p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::MeanRows { x, start, end } => {
                let d = g.len();
                let inv = T::one() / T::lit((end - start + 1) as f64);
                with_grad!(*x, |gx| {
                    for r in *start..=*end {
                        for (o, &gi) in gx[r * d..(r + 1) * d].iter_mut().zip(g) {
                            *o += gi * inv;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |gx| add_into(gx, g));
            }
            Op::Sum(x) => {
                with_grad!(*x, |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::Mean(x) => {
                let share = g[0] / T::lit(val(*x).len().max(1) as f64);
                with_grad!(*x, |gx| {
                    for o in gx.iter_mut() {
                        *o += share;
                    }
                });
            }
            Op::Bce {
                pred,
                target,
                weight,
                count,
            } => {
                if *count == T::zero() {
                    return Ok(());
                }
                let lo = T::lit(kernels::BCE_CLAMP);
                let hi = T::one() - lo;
                let pv = val(*pred).data();
                let scale = g[0] / *count;
                with_grad!(*pred, |gp| {
                    for (i, o) in gp.iter_mut().enumerate() {
                        let (p, t, w) = (pv[i], target[i], weight[i]);
                        if w == T::zero() || p < lo || p > hi {
                            continue;
                        }
                        *o += scale * w * ((T::one() - t) / (T::one() - p) - t / p);
                    }
                });
            }
            Op::SquaredSigmoidBce {
                logits,
                target,
                weight,
                count,
            } => {
                if *count == T::zero() {
                    return Ok(());
                }
                let lv = val(*logits).data();
                let scale = g[0] / *count;
                with_grad!(*logits, |gl| {
                    for (i, o) in gl.iter_mut().enumerate() {
                        let w = weight[i];
                        if w != T::zero() {
                            *o += scale * w * kernels::squared_sigmoid_bce_grad(lv[i], target[i]);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate<T: Float>(dst: &mut Option<Vec<T>>, g: &[T]) {
    match dst {
        Some(buf) => add_into(buf, g),
        None => *dst = Some(g.to_vec()),
    }
}

/// Worst entry found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over entries of `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_relative_error: f64,
    /// `(parameter index, flat entry)` of the maximum.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `eps`, over every entry of every parameter. `f` must be
/// deterministic; it receives a fresh graph and one leaf per parameter.
#[allow(clippy::needless_range_loop)]
pub fn grad_check<T: Float>(
    params: &[Tensor<T>],
    eps: f64,
    mut f: impl FnMut(&mut Graph<T>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut eval = |values: &[Tensor<T>]| -> Result<(Graph<T>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g, vars, loss))
    };
    let (mut g, vars, loss) = eval(params)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(params)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![T::zero(); t.len()], <[T]>::to_vec))
        .collect();
    drop(g);

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    for p in 0..work.len() {
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + T::lit(eps);
            let (g, _, l) = eval(&work)?;
            let plus = g.value(l).item().as_f64();
            work[p].data_mut()[i] = orig - T::lit(eps);
            let (g, _, l) = eval(&work)?;
            let minus = g.value(l).item().as_f64();
            work[p].data_mut()[i] = orig;
            // The perturbation actually applied after rounding to T.
            let step = (orig + T::lit(eps)).as_f64() - (orig - T::lit(eps)).as_f64();
            let numeric = (plus - minus) / step;
            let a = analytic[p][i].as_f64();
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.max_relative_error || !err.is_finite() {
                report.max_relative_error = err;
                report.worst = (p, i);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
