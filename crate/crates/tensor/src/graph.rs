//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to compute the vector-Jacobian product. [`Graph::backward`] walks the
//! tape once in reverse and accumulates gradients into the [`ParamStore`].

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::float::{gemm, Float};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    Mean { x: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu { x: Var, tanh: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<T> },
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Nll { log_probs: Var, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of every node reached by a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_leaves: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.shared_value(),
            op: Op::Param(id),
            needs_grad: p.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_leaves.insert(id, v);
        v
    }

    /// `a · b` over the last two axes with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_inner(a, b, false)
    }

    /// `a · bᵀ` where `b` is stored `[..., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_inner(a, b, true)
    }

    fn matmul_inner(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = matmul_forward(self.value(a), self.value(b), trans_b)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = elementwise(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = elementwise(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = elementwise(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.needs(x);
        self.push(out, Op::Scale { x, factor }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(TensorError::Contract("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(self.value(x).sum() / T::of_f64(n as f64));
        let ng = self.needs(x);
        Ok(self.push(out, Op::Mean { x }, ng))
    }

    /// Max-subtracted softmax along `axis`. `-inf` entries are allowed (they
    /// receive probability exactly zero) as long as every slice keeps one
    /// finite entry.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax_forward(self.value(x), axis, false)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Softmax { x, axis }, ng))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax_forward(self.value(x), axis, true)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::LogSoftmax { x, axis }, ng))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` of that width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.last_dim();
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(shape_err("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let eps = T::of_f64(eps);
        let w = T::of_f64(width as f64);
        let rows = xv.numel() / width.max(1);
        let mut normalized = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.rows() {
            let mean = row.iter().copied().sum::<T>() / w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / w;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                normalized.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::of_f64(GELU_C);
        let a = T::of_f64(GELU_A);
        let half = T::of_f64(0.5);
        let xv = self.value(x);
        let tanh: Vec<T> = xv.data().iter().map(|&v| (c * (v + a * v * v * v)).tanh()).collect();
        let data = xv.data().iter().zip(&tanh).map(|(&v, &t)| half * v * (T::one() + t)).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        let ng = self.needs(x);
        let tanh = if ng { tanh } else { Vec::new() };
        self.push(out, Op::Gelu { x, tanh }, ng)
    }

    /// Row gather from a rank-2 `table`; the gradient scatter-adds back.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(shape_err("gather_rows", tv.shape(), &[2]));
        }
        let (rows, width) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    what: "gather_rows table",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(&[ids.len(), width], out)?;
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Inverted dropout. Returns `x` untouched when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!("dropout probability {p} not in [0,1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::of_f64(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape(), out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat_last", self.shape(*first), s));
            }
            total += s[s.len() - 1];
        }
        let rows = numel(&lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(&shape, out)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape { x }, ng))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = permute_forward(self.value(x), axes)?;
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            ng,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise log
    /// probabilities `[n, classes]`.
    pub fn nll(&mut self, log_probs: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.value(log_probs);
        if lp.rank() != 2 || lp.shape()[0] != targets.len() {
            return Err(shape_err("nll", lp.shape(), &[targets.len()]));
        }
        if targets.is_empty() {
            return Err(TensorError::Contract("nll over zero rows".into()));
        }
        let classes = lp.shape()[1];
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(TensorError::Index {
                    what: "target class",
                    index: t,
                    bound: classes,
                });
            }
            total -= lp.row(i)[t];
        }
        let out = Tensor::scalar(total / T::of_f64(targets.len() as f64));
        let ng = self.needs(log_probs);
        Ok(self.push(
            out,
            Op::Nll {
                log_probs,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Cross-entropy for log-probability rows, validating that each row is
    /// normalized (logsumexp within 1e-5 of zero).
    pub fn cross_entropy(&mut self, log_probs: Var, targets: &[usize]) -> Result<Var> {
        for row in self.value(log_probs).rows() {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max.as_f64()
                + row
                    .iter()
                    .map(|&v| (v.as_f64() - max.as_f64()).exp())
                    .sum::<f64>()
                    .ln();
            if !(lse.abs() <= 1e-5) {
                return Err(TensorError::Numeric {
                    op: "cross_entropy",
                    detail: format!("row is not a log-probability vector (logsumexp {lse})"),
                });
            }
        }
        self.nll(log_probs, targets)
    }

    /// Runs the backward pass from a one-element `loss` and accumulates
    /// parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                if node.needs_grad {
                    store.accumulate(*id, g)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (ga, gb) = matmul_backward(self.value(*a), self.value(*b), g, *trans_b)?;
                if self.needs(*a) {
                    accumulate(grads, *a, ga)?;
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gb)?;
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let negate = matches!(node.op, Op::Sub { .. });
                if self.needs(*a) {
                    accumulate(grads, *a, reduce_to(g, self.shape(*a))?)?;
                }
                if self.needs(*b) {
                    let mut gb = reduce_to(g, self.shape(*b))?;
                    if negate {
                        gb = gb.map(|v| -v);
                    }
                    accumulate(grads, *b, gb)?;
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let prod = elementwise(g, self.value(*b), "mul_grad", |x, y| x * y)?;
                    accumulate(grads, *a, reduce_to(&prod, self.shape(*a))?)?;
                }
                if self.needs(*b) {
                    let prod = elementwise(g, self.value(*a), "mul_grad", |x, y| x * y)?;
                    accumulate(grads, *b, reduce_to(&prod, self.shape(*b))?)?;
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                accumulate(grads, *x, g.map(|v| v * f))?;
            }
            Op::Sum { x } => {
                accumulate(grads, *x, Tensor::full(self.shape(*x), g.data()[0]))?;
            }
            Op::Mean { x } => {
                let n = T::of_f64(self.value(*x).numel() as f64);
                accumulate(grads, *x, Tensor::full(self.shape(*x), g.data()[0] / n))?;
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut gx = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        let dot: T = (0..len)
                            .map(|i| g.data()[base + i * inner] * y.data()[base + i * inner])
                            .sum();
                        for i in 0..len {
                            let idx = base + i * inner;
                            gx[idx] = y.data()[idx] * (g.data()[idx] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape(), gx)?)?;
            }
            Op::LogSoftmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut gx = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        let total: T = (0..len).map(|i| g.data()[base + i * inner]).sum();
                        for i in 0..len {
                            let idx = base + i * inner;
                            gx[idx] = g.data()[idx] - y.data()[idx].exp() * total;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape(), gx)?)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let width = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                let w = T::of_f64(width as f64);
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); g.numel()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let span = r * width..(r + 1) * width;
                        let gy = &g.data()[span.clone()];
                        let xh = &normalized[span.clone()];
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..width {
                            let d = gy[j] * gam[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        for j in 0..width {
                            let d = gy[j] * gam[j];
                            gx[r * width + j] = is * (w * d - sum_d - xh[j] * sum_dx) / w;
                        }
                    }
                    accumulate(grads, *x, Tensor::new(g.shape(), gx)?)?;
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut gg = vec![T::zero(); width];
                    let mut gb = vec![T::zero(); width];
                    for (i, (&gy, &xh)) in g.data().iter().zip(normalized).enumerate() {
                        gg[i % width] += gy * xh;
                        gb[i % width] += gy;
                    }
                    if self.needs(*gamma) {
                        accumulate(grads, *gamma, Tensor::new(&[width], gg)?)?;
                    }
                    if self.needs(*beta) {
                        accumulate(grads, *beta, Tensor::new(&[width], gb)?)?;
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let c = T::of_f64(GELU_C);
                let half = T::of_f64(0.5);
                let three_a = T::of_f64(3.0 * GELU_A);
                let xv = self.value(*x);
                let gx: Vec<T> = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .zip(tanh)
                    .map(|((&v, &gy), &t)| {
                        let dt = (T::one() - t * t) * c * (T::one() + three_a * v * v);
                        gy * (half * (T::one() + t) + half * v * dt)
                    })
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.shape(), gx)?)?;
            }
            Op::Gather { table, ids } => {
                let shape = self.shape(*table);
                let width = shape[1];
                let mut gt = Tensor::zeros(shape);
                let data = gt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * width..(r + 1) * width];
                    for (d, &s) in data[id * width..(id + 1) * width].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                accumulate(grads, *table, gt)?;
            }
            Op::Dropout { x, mask } => {
                let gx: Vec<T> = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                accumulate(grads, *x, Tensor::new(g.shape(), gx)?)?;
            }
            Op::Concat { parts } => {
                let total = g.last_dim();
                let rows = g.numel() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).last_dim();
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(rows * width);
                        for r in 0..rows {
                            let start = r * total + offset;
                            gp.extend_from_slice(&g.data()[start..start + width]);
                        }
                        accumulate(grads, p, Tensor::new(self.shape(p), gp)?)?;
                    }
                    offset += width;
                }
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, g.reshape(self.shape(*x))?)?;
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                accumulate(grads, *x, permute_forward(g, &inverse)?)?;
            }
            Op::Nll { log_probs, targets } => {
                let shape = self.shape(*log_probs);
                let classes = shape[1];
                let mut gl = Tensor::zeros(shape);
                let scale = -g.data()[0] / T::of_f64(targets.len() as f64);
                for (i, &t) in targets.iter().enumerate() {
                    gl.data_mut()[i * classes + t] = scale;
                }
                accumulate(grads, *log_probs, gl)?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

fn softmax_forward<T: Float>(x: &Tensor<T>, axis: usize, log: bool) -> Result<Tensor<T>> {
    let op = if log { "log_softmax" } else { "softmax" };
    if axis >= x.rank() {
        return Err(shape_err(op, x.shape(), &[axis]));
    }
    if let Some(bad) = x.data().iter().find(|v| v.is_nan() || **v == T::infinity()) {
        return Err(TensorError::Numeric {
            op,
            detail: format!("invalid input value {bad}"),
        });
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for j in 0..inner {
            let base = o * len * inner + j;
            let max = (0..len).fold(T::neg_infinity(), |m, i| m.max(src[base + i * inner]));
            if max == T::neg_infinity() {
                return Err(TensorError::Numeric {
                    op,
                    detail: "slice has no finite entry".into(),
                });
            }
            let mut total = T::zero();
            for i in 0..len {
                let e = (src[base + i * inner] - max).exp();
                out[base + i * inner] = e;
                total += e;
            }
            if log {
                let lse = total.ln();
                for i in 0..len {
                    out[base + i * inner] = src[base + i * inner] - max - lse;
                }
            } else {
                for i in 0..len {
                    out[base + i * inner] /= total;
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element strides of `inp` seen through the broadcast `out` shape
/// (zero along broadcast axes).
fn broadcast_strides(inp: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - inp.len();
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        if inp[i] != 1 {
            strides[i + offset] = s;
        }
        s *= inp[i];
    }
    strides
}

/// Visits every output offset of `out` together with the matching offsets
/// under strides `sa` and `sb`.
fn broadcast_zip(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    if numel(out) == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0; rank - 1];
    let (mut oa, mut ob, mut o) = (0, 0, 0);
    loop {
        for j in 0..last {
            f(o + j, oa + j * la, ob + j * lb);
        }
        o += last;
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn elementwise<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    if b.numel() > 0 && a.shape().ends_with(b.shape()) {
        let w = b.numel();
        let bd = b.data();
        let data = a
            .data()
            .chunks_exact(w)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        return Tensor::new(a.shape(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| shape_err(op, a.shape(), b.shape()))?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut out = vec![T::zero(); numel(&out_shape)];
    let (ad, bd) = (a.data(), b.data());
    broadcast_zip(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
    Tensor::new(&out_shape, out)
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to<T: Float>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    if !shape.is_empty() && numel(shape) > 0 && g.shape().ends_with(shape) {
        let w = numel(shape);
        let mut out = vec![T::zero(); w];
        for row in g.data().chunks_exact(w) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        return Tensor::new(shape, out);
    }
    let sa = broadcast_strides(shape, g.shape());
    let zero = vec![0; g.rank()];
    let mut out = vec![T::zero(); numel(shape)];
    let gd = g.data();
    broadcast_zip(g.shape(), &sa, &zero, |o, ia, _| out[ia] += gd[o]);
    Tensor::new(shape, out)
}

fn permute_forward<T: Float>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(shape_err("permute", x.shape(), axes));
    }
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * x.shape()[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zero = vec![0; rank];
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    broadcast_zip(&out_shape, &strides, &zero, |o, i, _| out[o] = xd[i]);
    Tensor::new(&out_shape, out)
}

struct MatDims {
    m: usize,
    k: usize,
    n: usize,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != kb {
        return Err(shape_err("matmul", a, b));
    }
    Ok(MatDims {
        m,
        k,
        n,
        a_batch: a[..a.len() - 2].to_vec(),
        b_batch: b[..b.len() - 2].to_vec(),
    })
}

fn matmul_forward<T: Float>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape(), trans_b)?;
    if d.b_batch.is_empty() {
        let rows = numel(&d.a_batch) * d.m;
        let mut out = vec![T::zero(); rows * d.n];
        gemm(rows, d.k, d.n, T::one(), a.data(), false, b.data(), trans_b, T::zero(), &mut out);
        let mut shape = d.a_batch.clone();
        shape.extend([d.m, d.n]);
        return Tensor::new(&shape, out);
    }
    let batch = broadcast_shape(&d.a_batch, &d.b_batch).ok_or_else(|| shape_err("matmul", a.shape(), b.shape()))?;
    let sa = broadcast_strides(&d.a_batch, &batch);
    let sb = broadcast_strides(&d.b_batch, &batch);
    let (asz, bsz, csz) = (d.m * d.k, d.k * d.n, d.m * d.n);
    let mut out = vec![T::zero(); numel(&batch) * csz];
    broadcast_zip(&batch, &sa, &sb, |o, ia, ib| {
        gemm(
            d.m,
            d.k,
            d.n,
            T::one(),
            &a.data()[ia * asz..(ia + 1) * asz],
            false,
            &b.data()[ib * bsz..(ib + 1) * bsz],
            trans_b,
            T::zero(),
            &mut out[o * csz..(o + 1) * csz],
        )
    });
    let mut shape = batch;
    shape.extend([d.m, d.n]);
    Tensor::new(&shape, out)
}

fn matmul_backward<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    trans_b: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = matmul_dims(a.shape(), b.shape(), trans_b)?;
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    let step = |m: usize, av: &[T], bv: &[T], gv: &[T], gav: &mut [T], gbv: &mut [T]| {
        // dA = dC · op(B)ᵀ
        gemm(m, d.n, d.k, T::one(), gv, false, bv, !trans_b, T::one(), gav);
        if trans_b {
            // dB[n,k] = dCᵀ · A
            gemm(d.n, m, d.k, T::one(), gv, true, av, false, T::one(), gbv);
        } else {
            // dB[k,n] = Aᵀ · dC
            gemm(d.k, m, d.n, T::one(), av, true, gv, false, T::one(), gbv);
        }
    };
    if d.b_batch.is_empty() {
        let rows = numel(&d.a_batch) * d.m;
        step(rows, a.data(), b.data(), g.data(), &mut ga, &mut gb);
    } else {
        let batch = broadcast_shape(&d.a_batch, &d.b_batch).ok_or_else(|| shape_err("matmul", a.shape(), b.shape()))?;
        let sa = broadcast_strides(&d.a_batch, &batch);
        let sb = broadcast_strides(&d.b_batch, &batch);
        let (asz, bsz, csz) = (d.m * d.k, d.k * d.n, d.m * d.n);
        broadcast_zip(&batch, &sa, &sb, |o, ia, ib| {
            step(
                d.m,
                &a.data()[ia * asz..(ia + 1) * asz],
                &b.data()[ib * bsz..(ib + 1) * bsz],
                &g.data()[o * csz..(o + 1) * csz],
                &mut ga[ia * asz..(ia + 1) * asz],
                &mut gb[ib * bsz..(ib + 1) * bsz],
            )
        });
    }
    Ok((Tensor::new(a.shape(), ga)?, Tensor::new(b.shape(), gb)?))
}
