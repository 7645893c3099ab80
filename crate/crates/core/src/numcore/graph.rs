//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every batch. Leaves either borrow a parameter
//! tensor (`param`) or own a constant; every op appends one node, so insertion
//! order is a topological order and `backward` simply walks it in reverse.

use std::borrow::Cow;
use std::sync::Arc;

use rand::Rng;

use crate::error::{dim_err, Error, Result};

use super::kernels::{self, log_sigmoid, sigmoid};
use super::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Additive mask value applied to inadmissible softmax entries.
pub const MASK_FILL: f64 = -1e9;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Transpose { x: Var, batch: usize, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, T),
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Concat { inputs: Vec<Var>, widths: Vec<usize> },
    SliceCols { x: Var, start: usize, width: usize },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    LogSigmoid(Var),
    Softmax(Var),
    Mean { x: Var, axis_len: usize, inner: usize },
    Gather { table: Var, idx: Vec<usize> },
    GatherCols { x: Var, idx: Arc<[usize]>, cols_in: usize },
    ScatterCols { x: Var, idx: Arc<[usize]>, cols_out: usize },
    LayerNorm { x: Var, inv_std: Vec<T> },
    RowDot(Var, Var),
    Sum(Var),
    WeightedSum { x: Var, weights: Vec<T> },
    SumSquares(Var),
    SquaredError(Var, Var),
    Reshape(Var),
    MaskRows { x: Var, keep: Arc<[bool]> },
    Dropout { x: Var, scale: Vec<T> },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode autodiff tape. Parameters are borrowed for the tape's lifetime.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    training: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every trainable leaf, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a trainable leaf; `None` for constants and interior nodes.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
        }
    }

    /// Dropout is active only in training mode.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Trainable leaf borrowing `tensor`.
    pub fn param(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(tensor), true)
    }

    /// Trainable leaf owning `tensor`.
    pub fn param_owned(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(tensor), true)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(tensor), false)
    }

    pub fn constant_ref(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(tensor), false)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- forward ops ----------------------------------------------------

    /// `[..., k] x [k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(dim_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for p in 0..batch {
            kernels::matmul_acc(
                &ad[p * m * k..(p + 1) * m * k],
                &bd[p * k * n..(p + 1) * k * n],
                &mut out[p * m * n..(p + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push("bmm", value, Op::BatchMatMul { a, b, batch, m, k, n }, &[a, b])
    }

    /// Swaps the last two axes (rank 2 or 3).
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, rows, cols) = match s.as_slice() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => return Err(dim_err("transpose", format!("rank {} unsupported", s.len()))),
        };
        let data = kernels::transpose(self.value(x).data(), batch, rows, cols);
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let value = Tensor::new(shape, data)?;
        self.push("transpose", value, Op::Transpose { x, batch, rows, cols }, &[x])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push("scalar_mul", value, Op::ScalarMul(x, c), &[x])
    }

    /// Adds a `[D]` row to every row of a `[..., D]` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(x).clone();
        let d = r.len();
        for chunk in value.data_mut().chunks_mut(d) {
            for (v, &b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        self.push("add_row", value, Op::AddRow { x, row }, &[x, row])
    }

    /// Multiplies every row of a `[..., D]` tensor by a `[D]` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(x).clone();
        let d = r.len();
        for chunk in value.data_mut().chunks_mut(d) {
            for (v, &b) in chunk.iter_mut().zip(&r) {
                *v *= b;
            }
        }
        self.push("mul_row", value, Op::MulRow { x, row }, &[x, row])
    }

    fn check_row(&self, op: &'static str, x: Var, row: Var) -> Result<()> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr.len() != 1 || sx.is_empty() || sx[sx.len() - 1] != sr[0] {
            return Err(dim_err(op, format!("{sx:?} with row {sr:?}")));
        }
        Ok(())
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| dim_err("concat", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(dim_err("concat", format!("{s:?} vs leading {lead:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
            inputs,
        )
    }

    /// Columns `start..start + width` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let total = *s.last().ok_or_else(|| dim_err("slice_cols", "rank 0"))?;
        if start + width > total {
            return Err(dim_err("slice_cols", format!("{start}+{width} > {total}")));
        }
        let rows = self.value(x).numel() / total.max(1);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src[r * total + start..r * total + start + width]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = width;
        let value = Tensor::new(shape, out)?;
        self.push("slice_cols", value, Op::SliceCols { x, start, width }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.ln());
        self.push("log", value, Op::Log(x), &[x])
    }

    /// Stable `log(sigmoid(x))`; `log(1 - sigmoid(x))` is `log_sigmoid(-x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(log_sigmoid);
        self.push("log_sigmoid", value, Op::LogSigmoid(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis. Entries with `mask == false` receive an
    /// additive [`MASK_FILL`] before exponentiation; a row with no admissible
    /// entry outputs all zeros.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(dim_err(
                    "softmax",
                    format!("mask len {} vs {}", m.len(), xv.numel()),
                ));
            }
        }
        let d = xv.last_dim();
        let fill = T::from_f64_lossy(MASK_FILL);
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(d.max(1)).enumerate() {
            let row_mask = mask.map(|m| &m[r * d..(r + 1) * d]);
            if let Some(rm) = row_mask {
                if !rm.iter().any(|&k| k) {
                    row.fill(T::zero());
                    continue;
                }
                for (v, &keep) in row.iter_mut().zip(rm) {
                    if !keep {
                        *v += fill;
                    }
                }
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(dim_err("mean", format!("axis {axis} of {s:?}")));
        }
        let axis_len = s[axis];
        if axis_len == 0 {
            return Err(dim_err("mean", "empty axis"));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let n = T::of_usize(axis_len);
        for o in 0..outer {
            for a in 0..axis_len {
                let base = (o * axis_len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n);
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push("mean", value, Op::Mean { x, axis_len, inner }, &[x])
    }

    /// Embedding lookup: rows of a `[V, D]` table, giving `[idx.len(), D]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(dim_err("gather", format!("table shape {s:?}")));
        }
        let (rows, d) = (s[0], s[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(dim_err("gather", format!("index {i} >= {rows} rows")));
            }
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        self.push(
            "gather",
            value,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        )
    }

    /// Per-row column gather: `x: [M, R]`, `idx: M*C` -> `[M, C]` with
    /// `y[m, c] = x[m, idx[m*C + c]]`.
    pub fn gather_cols(&mut self, x: Var, idx: Arc<[usize]>, cols_out: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || idx.len() != s[0] * cols_out {
            return Err(dim_err("gather_cols", format!("{s:?} with {} indices", idx.len())));
        }
        let (rows, cols_in) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * cols_out);
        for m in 0..rows {
            for c in 0..cols_out {
                let j = idx[m * cols_out + c];
                if j >= cols_in {
                    return Err(dim_err("gather_cols", format!("index {j} >= {cols_in}")));
                }
                out.push(xv[m * cols_in + j]);
            }
        }
        let value = Tensor::new(vec![rows, cols_out], out)?;
        self.push("gather_cols", value, Op::GatherCols { x, idx, cols_in }, &[x])
    }

    /// Adjoint of [`gather_cols`](Self::gather_cols): `x: [M, C]` summed into
    /// `[M, cols_out]` bins by `idx`.
    pub fn scatter_cols(&mut self, x: Var, idx: Arc<[usize]>, cols_out: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || idx.len() != s[0] * s[1] {
            return Err(dim_err("scatter_cols", format!("{s:?} with {} indices", idx.len())));
        }
        let (rows, cols_in) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); rows * cols_out];
        for m in 0..rows {
            for c in 0..cols_in {
                let j = idx[m * cols_in + c];
                if j >= cols_out {
                    return Err(dim_err("scatter_cols", format!("index {j} >= {cols_out}")));
                }
                out[m * cols_out + j] += xv[m * cols_in + c];
            }
        }
        let value = Tensor::new(vec![rows, cols_out], out)?;
        self.push("scatter_cols", value, Op::ScatterCols { x, idx, cols_out }, &[x])
    }

    /// Normalizes each last-axis row to zero mean and unit variance:
    /// `(x - mean) / sqrt(var + eps)`. Scale and shift are separate ops.
    pub fn layer_norm_core(&mut self, x: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 {
            return Err(dim_err("layer_norm", "empty rows"));
        }
        let n = T::of_usize(d);
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.outer());
        for row in out.chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Row-wise dot product: `[..., D] . [..., D] -> [...]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let d = va.last_dim();
        let out: Vec<T> = va
            .data()
            .chunks(d.max(1))
            .zip(vb.data().chunks(d.max(1)))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
            .collect();
        let shape = va.shape()[..va.rank().saturating_sub(1)].to_vec();
        let value = Tensor::new(shape, out)?;
        self.push("row_dot", value, Op::RowDot(a, b), &[a, b])
    }

    /// Dot product of two equal-shape tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let flat_a = self.flatten(a)?;
        let flat_b = self.flatten(b)?;
        self.row_dot(flat_a, flat_b)
    }

    fn flatten(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() == 1 {
            return Ok(x);
        }
        let n = self.value(x).numel();
        self.reshape(x, vec![n])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    /// `sum_i w_i * x_i` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(dim_err(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), self.value(x).numel()),
            ));
        }
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&v, &w)| v * w)
            .sum();
        self.push("weighted_sum", Tensor::scalar(total), Op::WeightedSum { x, weights }, &[x])
    }

    /// Squared Frobenius norm as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).frobenius_sq());
        self.push("sum_squares", value, Op::SumSquares(x), &[x])
    }

    /// `sum (a - b)^2` as a scalar.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("squared_error", a, b)?;
        let total = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        self.push("squared_error", Tensor::scalar(total), Op::SquaredError(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Zeroes rows (over the last axis) whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: Arc<[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.outer() {
            return Err(dim_err(
                "mask_rows",
                format!("{} flags for {} rows", keep.len(), xv.outer()),
            ));
        }
        let d = xv.last_dim();
        let mut value = xv.clone();
        for (row, &k) in value.data_mut().chunks_mut(d.max(1)).zip(keep.iter()) {
            if !k {
                row.fill(T::zero());
            }
        }
        self.push("mask_rows", value, Op::MaskRows { x, keep }, &[x])
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Usage(format!("dropout probability {p} must be < 1")));
        }
        let keep_scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let scale: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { x, scale }, &[x])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Consumes the tape; every trainable
    /// leaf gets a gradient of its own shape (zeros if unreachable).
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.backprop_node(id, &gy, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.requires_grad => {
                    Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape())))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn zeros_like(&self, var: Var) -> Tensor<T> {
        Tensor::zeros(self.shape(var))
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn backprop_node(&self, id: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(*a) {
                    let mut ga = self.zeros_like(*a);
                    kernels::matmul_bt_acc(gy.data(), self.value(*b).data(), ga.data_mut(), *m, *n, *k);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = self.zeros_like(*b);
                    kernels::matmul_at_acc(self.value(*a).data(), gy.data(), gb.data_mut(), *m, *k, *n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::BatchMatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let mut ga = self.zeros_like(*a);
                    let bd = self.value(*b).data();
                    for p in 0..*batch {
                        kernels::matmul_bt_acc(
                            &gy.data()[p * m * n..(p + 1) * m * n],
                            &bd[p * k * n..(p + 1) * k * n],
                            &mut ga.data_mut()[p * m * k..(p + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = self.zeros_like(*b);
                    let ad = self.value(*a).data();
                    for p in 0..*batch {
                        kernels::matmul_at_acc(
                            &ad[p * m * k..(p + 1) * m * k],
                            &gy.data()[p * m * n..(p + 1) * m * n],
                            &mut gb.data_mut()[p * k * n..(p + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose { x, batch, rows, cols } => {
                // gy has the transposed layout [cols, rows]
                let data = kernels::transpose(gy.data(), *batch, *cols, *rows);
                let g = Tensor::new(self.shape(*x).to_vec(), data).expect("same numel");
                self.accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, gy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let g = self.elementwise(gy, self.value(*b), |g, o| g * o);
                    self.accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    let g = self.elementwise(gy, self.value(*a), |g, o| g * o);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::ScalarMul(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, gy.map(|v| v * c));
            }
            Op::AddRow { x, row } => {
                self.accumulate(grads, *x, gy.clone());
                if self.wants(*row) {
                    let mut gr = self.zeros_like(*row);
                    let d = gr.numel();
                    for chunk in gy.data().chunks(d) {
                        for (g, &v) in gr.data_mut().iter_mut().zip(chunk) {
                            *g += v;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulRow { x, row } => {
                let r = self.value(*row).data();
                let d = r.len();
                if self.wants(*x) {
                    let mut gx = gy.clone();
                    for chunk in gx.data_mut().chunks_mut(d) {
                        for (g, &s) in chunk.iter_mut().zip(r) {
                            *g *= s;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*row) {
                    let mut gr = self.zeros_like(*row);
                    for (gchunk, xchunk) in gy.data().chunks(d).zip(self.value(*x).data().chunks(d)) {
                        for ((g, &gv), &xv) in gr.data_mut().iter_mut().zip(gchunk).zip(xchunk) {
                            *g += gv * xv;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = gy.numel() / total.max(1);
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if self.wants(v) {
                        let mut g = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            g.extend_from_slice(&gy.data()[r * total + offset..r * total + offset + w]);
                        }
                        let g = Tensor::new(self.shape(v).to_vec(), g).expect("same numel");
                        self.accumulate(grads, v, g);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start, width } => {
                let mut g = self.zeros_like(*x);
                let total = g.last_dim();
                for (r, chunk) in gy.data().chunks(*width).enumerate() {
                    g.data_mut()[r * total + start..r * total + start + width].copy_from_slice(chunk);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Relu(x) => {
                let g = self.elementwise(gy, self.value(*x), |g, v| if v > T::zero() { g } else { T::zero() });
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = self.elementwise(gy, y, |g, s| g * s * (T::one() - s));
                self.accumulate(grads, *x, g);
            }
            Op::Log(x) => {
                let g = self.elementwise(gy, self.value(*x), |g, v| g / v);
                self.accumulate(grads, *x, g);
            }
            Op::LogSigmoid(x) => {
                let g = self.elementwise(gy, self.value(*x), |g, v| g * sigmoid(-v));
                self.accumulate(grads, *x, g);
            }
            Op::Softmax(x) => {
                let d = y.last_dim().max(1);
                let mut g = y.as_ref().clone();
                for (gr, (yr, dyr)) in g
                    .data_mut()
                    .chunks_mut(d)
                    .zip(y.data().chunks(d).zip(gy.data().chunks(d)))
                {
                    let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &dv) in gr.iter_mut().zip(yr).zip(dyr) {
                        *o = yv * (dv - dot);
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Mean { x, axis_len, inner } => {
                let mut g = self.zeros_like(*x);
                let n = T::of_usize(*axis_len);
                let outer = gy.numel() / inner.max(&1);
                for o in 0..outer {
                    for a in 0..*axis_len {
                        let base = (o * axis_len + a) * inner;
                        for i in 0..*inner {
                            g.data_mut()[base + i] = gy.data()[o * inner + i] / n;
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Gather { table, idx } => {
                let mut g = self.zeros_like(*table);
                let d = g.last_dim();
                for (r, &i) in idx.iter().enumerate() {
                    let src = &gy.data()[r * d..(r + 1) * d];
                    for (t, &v) in g.row_mut(i).iter_mut().zip(src) {
                        *t += v;
                    }
                }
                self.accumulate(grads, *table, g);
            }
            Op::GatherCols { x, idx, cols_in } => {
                let mut g = self.zeros_like(*x);
                let cols_out = gy.last_dim();
                for (pos, &j) in idx.iter().enumerate() {
                    let m = pos / cols_out;
                    g.data_mut()[m * cols_in + j] += gy.data()[pos];
                }
                self.accumulate(grads, *x, g);
            }
            Op::ScatterCols { x, idx, cols_out } => {
                let mut g = self.zeros_like(*x);
                let cols_in = g.last_dim();
                for (pos, &j) in idx.iter().enumerate() {
                    let m = pos / cols_in;
                    g.data_mut()[pos] = gy.data()[m * cols_out + j];
                }
                self.accumulate(grads, *x, g);
            }
            Op::LayerNorm { x, inv_std } => {
                let d = y.last_dim();
                let n = T::of_usize(d);
                let mut g = self.zeros_like(*x);
                for (r, inv) in inv_std.iter().enumerate() {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let dyr = &gy.data()[r * d..(r + 1) * d];
                    let mean_dy = dyr.iter().copied().sum::<T>() / n;
                    let mean_dyy = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((o, &yv), &dv) in g.row_mut(r).iter_mut().zip(yr).zip(dyr) {
                        *o = *inv * (dv - mean_dy - yv * mean_dyy);
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::RowDot(a, b) => {
                let d = self.value(*a).last_dim().max(1);
                for (target, other) in [(*a, *b), (*b, *a)] {
                    if !self.wants(target) {
                        continue;
                    }
                    let mut g = self.value(other).clone();
                    for (chunk, &s) in g.data_mut().chunks_mut(d).zip(gy.data()) {
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, target, g);
                }
            }
            Op::Sum(x) => {
                let s = gy.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::WeightedSum { x, weights } => {
                let s = gy.data()[0];
                let g = Tensor::new(
                    self.shape(*x).to_vec(),
                    weights.iter().map(|&w| w * s).collect(),
                )
                .expect("same numel");
                self.accumulate(grads, *x, g);
            }
            Op::SumSquares(x) => {
                let s = gy.data()[0] + gy.data()[0];
                self.accumulate(grads, *x, self.value(*x).map(|v| v * s));
            }
            Op::SquaredError(a, b) => {
                let s = gy.data()[0] + gy.data()[0];
                let diff = self.elementwise(self.value(*a), self.value(*b), |p, q| (p - q) * s);
                if self.wants(*b) {
                    self.accumulate(grads, *b, diff.map(|v| -v));
                }
                self.accumulate(grads, *a, diff);
            }
            Op::Reshape(x) => {
                let g = gy.clone().reshaped(self.shape(*x).to_vec()).expect("same numel");
                self.accumulate(grads, *x, g);
            }
            Op::MaskRows { x, keep } => {
                let d = gy.last_dim().max(1);
                let mut g = gy.clone();
                for (row, &k) in g.data_mut().chunks_mut(d).zip(keep.iter()) {
                    if !k {
                        row.fill(T::zero());
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Dropout { x, scale } => {
                let data = gy.data().iter().zip(scale).map(|(&g, &s)| g * s).collect();
                let g = Tensor::new(gy.shape().to_vec(), data).expect("same numel");
                self.accumulate(grads, *x, g);
            }
        }
    }

    fn elementwise(&self, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data).expect("same numel")
    }
}
