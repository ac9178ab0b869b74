//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! Every op appends one node holding its output and whatever the backward
//! rule needs. [`Tape::backward`] walks the nodes in reverse creation order
//! exactly once, so repeated calls on the same tape are bit-identical.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op-kind tag, used in error messages and introspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    ScalarMul,
    BiasAdd,
    Relu,
    MaxZero,
    RowSoftmax,
    LayerNorm,
    Concat,
    GatherRows,
    GatherCols,
    MeanAxis,
    SumAxis,
    SumAll,
    SquaredL2,
    SmoothL1,
    PairwiseSqDist,
    MinAxis,
    Transpose,
    Reshape,
    Exp,
    RowNorm,
    MulRows,
    DivRows,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, T),
    BiasAdd(Var, Var),
    Relu(Var),
    MaxZero(Var),
    RowSoftmax(Var),
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, xhat: Vec<T>, inv_std: Vec<T> },
    Concat(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    GatherCols { x: Var, idx: Vec<usize> },
    MeanAxis { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    SquaredL2(Var),
    SmoothL1 { pred: Var, target: Var, beta: T },
    PairwiseSqDist(Var, Var),
    MinAxis { x: Var, axis: usize, arg: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    Exp(Var),
    RowNorm(Var),
    MulRows(Var, Var),
    DivRows(Var, Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::BiasAdd(..) => OpKind::BiasAdd,
            Op::Relu(_) => OpKind::Relu,
            Op::MaxZero(_) => OpKind::MaxZero,
            Op::RowSoftmax(_) => OpKind::RowSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat(_) => OpKind::Concat,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::GatherCols { .. } => OpKind::GatherCols,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::SumAll(_) => OpKind::SumAll,
            Op::SquaredL2(_) => OpKind::SquaredL2,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
            Op::PairwiseSqDist(..) => OpKind::PairwiseSqDist,
            Op::MinAxis { .. } => OpKind::MinAxis,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Exp(_) => OpKind::Exp,
            Op::RowNorm(_) => OpKind::RowNorm,
            Op::MulRows(..) => OpKind::MulRows,
            Op::DivRows(..) => OpKind::DivRows,
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Record of one forward computation.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    notes: Vec<(usize, String)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if !t.is_matrix() {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
}

impl<T: Scalar> Tape<T> {
    /// A tape that checks every op output for NaN/Inf.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: true, notes: Vec::new() }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Free-form diagnostics attached to nodes (e.g. degenerate fallbacks).
    pub fn notes(&self) -> &[(usize, String)] {
        &self.notes
    }

    pub fn note(&mut self, v: Var, msg: impl Into<String>) {
        self.notes.push((v.0, msg.into()));
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name(op.kind()), node: id });
        }
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(id))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn var(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node { op: Op::Param(id), value: store.value(id).clone(), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Binds every parameter of the store; the result is indexed by `ParamId`.
    pub fn bind(&mut self, store: &ParamStore<T>) -> Vec<Var> {
        store.iter().map(|(id, _)| self.param(store, id)).collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), Tensor::from_raw(vec![m, n], out), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        dims2(op, self.value(a)).map(|_| ())
    }

    fn zip(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let name = op_name(op.kind());
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_raw(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(op, out, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scalar_mul(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(Op::ScalarMul(a, c), out, ng)
    }

    /// `x + b` with `b` of shape `[1, cols]` broadcast over rows.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = dims2("bias_add", self.value(x))?;
        if self.value(b).shape() != [1, c] {
            return Err(Error::shape("bias_add", format!("{:?} + {:?}", self.value(x).shape(), self.value(b).shape())));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v = *v + bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(Op::BiasAdd(x, b), Tensor::from_raw(vec![r, c], data), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        dims2("relu", self.value(x))?;
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(x);
        self.push(Op::Relu(x), out, ng)
    }

    /// `max(0, x)`; same rule as relu, kept as its own kind for loss code.
    pub fn max_with_zero(&mut self, x: Var) -> Result<Var> {
        dims2("max_with_zero", self.value(x))?;
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(Op::MaxZero(x), out, ng)
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("row_softmax", self.value(x))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let ng = self.ng(x);
        self.push(Op::RowSoftmax(x), Tensor::from_raw(vec![r, c], data), ng)
    }

    /// Normalization over the last axis with optional `[1, cols]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: T) -> Result<Var> {
        let (r, c) = dims2("layer_norm", self.value(x))?;
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).shape() != [1, c] {
                return Err(Error::shape("layer_norm", format!("affine {:?} for width {c}", self.value(p).shape())));
            }
        }
        let n = T::lit(c as f64);
        let xs = self.value(x).data();
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * is;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let g = self.value(g).data();
            for row in out.chunks_mut(c) {
                for (v, &gg) in row.iter_mut().zip(g) {
                    *v = *v * gg;
                }
            }
        }
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_mut(c) {
                for (v, &bb) in row.iter_mut().zip(b) {
                    *v = *v + bb;
                }
            }
        }
        let ng = self.ng(x) || gain.is_some_and(|g| self.ng(g)) || bias.is_some_and(|b| self.ng(b));
        self.push(Op::LayerNorm { x, gain, bias, xhat, inv_std }, Tensor::from_raw(vec![r, c], out), ng)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let r = dims2("concat", self.value(first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2("concat", self.value(p))?;
            if pr != r {
                return Err(Error::shape("concat", format!("row counts {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::Concat(parts.to_vec()), Tensor::from_raw(vec![r, total], data), ng)
    }

    /// Selects rows by a constant index list (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = dims2("gather_rows", self.value(x))?;
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of {r} rows")));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let ng = self.ng(x);
        self.push(Op::GatherRows { x, idx: idx.to_vec() }, Tensor::from_raw(vec![idx.len(), c], data), ng)
    }

    /// Selects columns by a constant index list.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = dims2("gather_cols", self.value(x))?;
        if idx.is_empty() {
            return Err(Error::shape("gather_cols", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::shape("gather_cols", format!("index {bad} out of {c} columns")));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * r);
        for i in 0..r {
            let row = v.row(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        let ng = self.ng(x);
        self.push(Op::GatherCols { x, idx: idx.to_vec() }, Tensor::from_raw(vec![r, idx.len()], data), ng)
    }

    fn reduce_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, Vec<T>, Vec<usize>)> {
        let (r, c) = dims2(op, self.value(x))?;
        let xs = self.value(x).data();
        match axis {
            0 => {
                let mut out = vec![T::zero(); c];
                for row in xs.chunks(c) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                Ok((r, c, out, vec![1, c]))
            }
            1 => Ok((r, c, xs.chunks(c).map(|row| row.iter().copied().sum()).collect(), vec![r, 1])),
            _ => Err(Error::shape(op, format!("axis {axis} on a matrix"))),
        }
    }

    /// Mean over `axis` (0: down rows → `[1, c]`, 1: across columns → `[r, 1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c, mut out, shape) = self.reduce_axis("mean_axis", x, axis)?;
        let n = T::lit(if axis == 0 { r } else { c } as f64);
        out.iter_mut().for_each(|v| *v = *v / n);
        let ng = self.ng(x);
        self.push(Op::MeanAxis { x, axis }, Tensor::from_raw(shape, out), ng)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (_, _, out, shape) = self.reduce_axis("sum_axis", x, axis)?;
        let ng = self.ng(x);
        self.push(Op::SumAxis { x, axis }, Tensor::from_raw(shape, out), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Op::SumAll(x), Tensor::scalar(s), ng)
    }

    /// Mean of all entries as a `[1, 1]` scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = T::lit(self.value(x).len() as f64);
        let s = self.sum_all(x)?;
        self.scalar_mul(s, T::one() / n)
    }

    /// Sum of squares.
    pub fn squared_l2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        let ng = self.ng(x);
        self.push(Op::SquaredL2(x), Tensor::scalar(s), ng)
    }

    /// Elementwise smooth-L1 of `pred - target` with transition `beta`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: T) -> Result<Var> {
        if beta <= T::zero() {
            return Err(Error::shape("smooth_l1", "beta must be positive"));
        }
        let half = T::lit(0.5);
        self.zip(Op::SmoothL1 { pred, target, beta }, pred, target, move |p, t| {
            let d = (p - t).abs();
            if d < beta {
                half * d * d / beta
            } else {
                d - half * beta
            }
        })
    }

    /// `out[i, j] = ||a_i - b_j||^2` for row sets `a: [m, d]`, `b: [n, d]`.
    pub fn pairwise_sq_distances(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = dims2("pairwise_sq_distances", self.value(a))?;
        let (n, d2) = dims2("pairwise_sq_distances", self.value(b))?;
        if d != d2 {
            return Err(Error::shape("pairwise_sq_distances", format!("widths {d} vs {d2}")));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let ai = &va[i * d..(i + 1) * d];
            for j in 0..n {
                let bj = &vb[j * d..(j + 1) * d];
                out[i * n + j] = ai.iter().zip(bj).map(|(&x, &y)| (x - y) * (x - y)).sum();
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::PairwiseSqDist(a, b), Tensor::from_raw(vec![m, n], out), ng)
    }

    /// Minimum over `axis`; ties resolve to the lowest index.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = dims2("min_axis", self.value(x))?;
        let xs = self.value(x).data();
        let (out, arg, shape) = match axis {
            1 => {
                let mut out = Vec::with_capacity(r);
                let mut arg = Vec::with_capacity(r);
                for row in xs.chunks(c) {
                    let (j, v) = row.iter().enumerate().fold((0, row[0]), |acc, (j, &v)| if v < acc.1 { (j, v) } else { acc });
                    out.push(v);
                    arg.push(j);
                }
                (out, arg, vec![r, 1])
            }
            0 => {
                let mut out = xs[..c].to_vec();
                let mut arg = vec![0; c];
                for i in 1..r {
                    for j in 0..c {
                        let v = xs[i * c + j];
                        if v < out[j] {
                            out[j] = v;
                            arg[j] = i;
                        }
                    }
                }
                (out, arg, vec![1, c])
            }
            _ => return Err(Error::shape("min_axis", format!("axis {axis} on a matrix"))),
        };
        let ng = self.ng(x);
        self.push(Op::MinAxis { x, axis, arg }, Tensor::from_raw(shape, out), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        dims2("transpose", self.value(x))?;
        let out = self.value(x).transposed();
        let ng = self.ng(x);
        self.push(Op::Transpose(x), out, ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshaped(vec![rows, cols])?;
        let ng = self.ng(x);
        self.push(Op::Reshape(x), out, ng)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.exp());
        let ng = self.ng(x);
        self.push(Op::Exp(x), out, ng)
    }

    /// Euclidean norm of each row, `[r, c] -> [r, 1]`. The gradient of a
    /// zero row is taken as zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("row_norm", self.value(x))?;
        let out = self.value(x).data().chunks(c).map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
        let ng = self.ng(x);
        self.push(Op::RowNorm(x), Tensor::from_raw(vec![r, 1], out), ng)
    }

    fn row_scale_check(&self, op: &'static str, x: Var, s: Var) -> Result<(usize, usize)> {
        let (r, c) = dims2(op, self.value(x))?;
        if self.value(s).shape() != [r, 1] {
            return Err(Error::shape(op, format!("{:?} by {:?}", self.value(x).shape(), self.value(s).shape())));
        }
        Ok((r, c))
    }

    /// Scales row `i` of `x` by `s[i, 0]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.row_scale_check("mul_rows", x, s)?;
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &k) in data.chunks_mut(c).zip(sv) {
            row.iter_mut().for_each(|v| *v = *v * k);
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(Op::MulRows(x, s), Tensor::from_raw(vec![r, c], data), ng)
    }

    /// Divides row `i` of `x` by `s[i, 0]`.
    pub fn div_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.row_scale_check("div_rows", x, s)?;
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &k) in data.chunks_mut(c).zip(sv) {
            row.iter_mut().for_each(|v| *v = *v / k);
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(Op::DivRows(x, s), Tensor::from_raw(vec![r, c], data), ng)
    }

    /// Hash of every discrete choice made during the forward pass: relu
    /// activation patterns, min arguments, gather indices and zero-norm rows.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) | Op::MaxZero(x) => {
                    i.hash(&mut h);
                    for &v in self.nodes[x.0].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MinAxis { arg, .. } => {
                    i.hash(&mut h);
                    arg.hash(&mut h);
                }
                Op::GatherRows { idx, .. } | Op::GatherCols { idx, .. } => {
                    i.hash(&mut h);
                    idx.hash(&mut h);
                }
                Op::RowNorm(_) => {
                    i.hash(&mut h);
                    for &v in node.value.data() {
                        (v == T::zero()).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        for (i, n) in &self.notes {
            (i, n).hash(&mut h);
        }
        h.finish()
    }

    /// Gradient of a scalar `loss` with respect to every node.
    ///
    /// Entries are `None` for nodes the loss does not depend on.
    pub fn grads(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut g: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(gi) = g[i].take() else { continue };
            self.backprop(i, &gi, &mut g);
            g[i] = Some(gi);
        }
        Ok(g
            .into_iter()
            .enumerate()
            .map(|(i, gi)| gi.map(|d| Tensor::from_raw(self.nodes[i].value.shape().to_vec(), d)))
            .collect())
    }

    /// Gradient of `loss` with respect to every parameter bound from `store`.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        let all = self.grads(loss)?;
        let mut out = Gradients::zeros_like(store);
        for (i, node) in self.nodes.iter().enumerate().take(all.len()) {
            if let (Op::Param(id), Some(gr)) = (&node.op, &all[i]) {
                if id.0 >= out.grads.len() {
                    return Err(Error::UnknownParam(format!("param id {} not in store", id.0)));
                }
                let slot = &mut out.grads[id.0];
                for (a, &b) in slot.data_mut().iter_mut().zip(gr.data()) {
                    *a = *a + b;
                }
                out.reached[id.0] = true;
            }
        }
        Ok(out)
    }

    fn backprop(&self, i: usize, gout: &[T], g: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = g[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                acc(*a, &mut |da| {
                    T::gemm(m, n, k, T::one(), gout, n as isize, 1, vb.data(), 1, n as isize, T::one(), da, k as isize, 1)
                });
                acc(*b, &mut |db| {
                    T::gemm(k, m, n, T::one(), va.data(), 1, k as isize, gout, n as isize, 1, T::one(), db, n as isize, 1)
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, gout));
                acc(*b, &mut |d| add_into(d, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, gout));
                acc(*b, &mut |d| d.iter_mut().zip(gout).for_each(|(x, &y)| *x = *x - y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for ((x, &go), &y) in d.iter_mut().zip(gout).zip(vb) {
                        *x = *x + go * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, &go), &y) in d.iter_mut().zip(gout).zip(va) {
                        *x = *x + go * y;
                    }
                });
            }
            Op::ScalarMul(a, c) => acc(*a, &mut |d| d.iter_mut().zip(gout).for_each(|(x, &y)| *x = *x + y * *c)),
            Op::BiasAdd(x, b) => {
                let c = val(*x).cols();
                acc(*x, &mut |d| add_into(d, gout));
                acc(*b, &mut |d| {
                    for row in gout.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Relu(x) | Op::MaxZero(x) => {
                let xs = val(*x).data();
                acc(*x, &mut |d| {
                    for ((dd, &go), &v) in d.iter_mut().zip(gout).zip(xs) {
                        if v > T::zero() {
                            *dd = *dd + go;
                        }
                    }
                });
            }
            Op::RowSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(gout.chunks(c)).zip(y.chunks(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((dd, &go), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dd = *dd + yy * (go - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = node.value.cols();
                let n = T::lit(c as f64);
                let gvals = gain.map(|gv| val(gv).data());
                if let Some(gv) = gain {
                    acc(*gv, &mut |d| {
                        for (grow, hrow) in gout.chunks(c).zip(xhat.chunks(c)) {
                            for ((dd, &go), &h) in d.iter_mut().zip(grow).zip(hrow) {
                                *dd = *dd + go * h;
                            }
                        }
                    });
                }
                if let Some(bv) = bias {
                    acc(*bv, &mut |d| {
                        for grow in gout.chunks(c) {
                            add_into(d, grow);
                        }
                    });
                }
                if ng(*x) {
                    acc(*x, &mut |d| {
                        let mut dxhat = vec![T::zero(); c];
                        for (r, ((drow, grow), hrow)) in d.chunks_mut(c).zip(gout.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                            for j in 0..c {
                                dxhat[j] = match gvals {
                                    Some(gv) => grow[j] * gv[j],
                                    None => grow[j],
                                };
                            }
                            let s1: T = dxhat.iter().copied().sum();
                            let s2: T = dxhat.iter().zip(hrow).map(|(&a, &b)| a * b).sum();
                            let k = inv_std[r] / n;
                            for j in 0..c {
                                drow[j] = drow[j] + k * (n * dxhat[j] - s1 - hrow[j] * s2);
                            }
                        }
                    });
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |d| {
                        for (drow, grow) in d.chunks_mut(w).zip(gout.chunks(total)) {
                            add_into(drow, &grow[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = val(*x).cols();
                acc(*x, &mut |d| {
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(&mut d[r * c..(r + 1) * c], &gout[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::GatherCols { x, idx } => {
                let c = val(*x).cols();
                let w = idx.len();
                acc(*x, &mut |d| {
                    for (drow, grow) in d.chunks_mut(c).zip(gout.chunks(w)) {
                        for (&j, &go) in idx.iter().zip(grow) {
                            drow[j] = drow[j] + go;
                        }
                    }
                });
            }
            Op::MeanAxis { x, axis } | Op::SumAxis { x, axis } => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                let scale = match (&node.op, axis) {
                    (Op::MeanAxis { .. }, 0) => T::one() / T::lit(r as f64),
                    (Op::MeanAxis { .. }, _) => T::one() / T::lit(c as f64),
                    _ => T::one(),
                };
                let axis = *axis;
                acc(*x, &mut |d| {
                    for (i, drow) in d.chunks_mut(c).enumerate() {
                        for (j, dd) in drow.iter_mut().enumerate() {
                            let go = if axis == 0 { gout[j] } else { gout[i] };
                            *dd = *dd + go * scale;
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v = *v + gout[0])),
            Op::SquaredL2(x) => {
                let xs = val(*x).data();
                let two = T::lit(2.0);
                acc(*x, &mut |d| d.iter_mut().zip(xs).for_each(|(v, &xx)| *v = *v + two * xx * gout[0]));
            }
            Op::SmoothL1 { pred, target, beta } => {
                let (p, t) = (val(*pred).data(), val(*target).data());
                let deriv = |k: usize| {
                    let diff = p[k] - t[k];
                    if diff.abs() < *beta {
                        diff / *beta
                    } else {
                        diff.signum()
                    }
                };
                acc(*pred, &mut |d| d.iter_mut().enumerate().for_each(|(k, v)| *v = *v + gout[k] * deriv(k)));
                acc(*target, &mut |d| d.iter_mut().enumerate().for_each(|(k, v)| *v = *v - gout[k] * deriv(k)));
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, dim, n) = (va.rows(), va.cols(), vb.rows());
                let (xa, xb) = (va.data(), vb.data());
                let two = T::lit(2.0);
                acc(*a, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            let w = two * gout[i * n + j];
                            for k in 0..dim {
                                d[i * dim + k] = d[i * dim + k] + w * (xa[i * dim + k] - xb[j * dim + k]);
                            }
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            let w = two * gout[i * n + j];
                            for k in 0..dim {
                                d[j * dim + k] = d[j * dim + k] - w * (xa[i * dim + k] - xb[j * dim + k]);
                            }
                        }
                    }
                });
            }
            Op::MinAxis { x, axis, arg } => {
                let c = val(*x).cols();
                let axis = *axis;
                acc(*x, &mut |d| {
                    for (k, &a) in arg.iter().enumerate() {
                        let flat = if axis == 1 { k * c + a } else { a * c + k };
                        d[flat] = d[flat] + gout[k];
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = d[i * c + j] + gout[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, gout)),
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ((dd, &go), &yy) in d.iter_mut().zip(gout).zip(y) {
                        *dd = *dd + go * yy;
                    }
                });
            }
            Op::RowNorm(x) => {
                let c = val(*x).cols();
                let xs = val(*x).data();
                let norms = node.value.data();
                acc(*x, &mut |d| {
                    for (r, (drow, xrow)) in d.chunks_mut(c).zip(xs.chunks(c)).enumerate() {
                        if norms[r] > T::zero() {
                            let k = gout[r] / norms[r];
                            for (dd, &xx) in drow.iter_mut().zip(xrow) {
                                *dd = *dd + k * xx;
                            }
                        }
                    }
                });
            }
            Op::MulRows(x, s) | Op::DivRows(x, s) => {
                let div = matches!(node.op, Op::DivRows(..));
                let c = val(*x).cols();
                let (xs, ss) = (val(*x).data(), val(*s).data());
                acc(*x, &mut |d| {
                    for (r, (drow, grow)) in d.chunks_mut(c).zip(gout.chunks(c)).enumerate() {
                        let k = if div { T::one() / ss[r] } else { ss[r] };
                        for (dd, &go) in drow.iter_mut().zip(grow) {
                            *dd = *dd + go * k;
                        }
                    }
                });
                acc(*s, &mut |d| {
                    for (r, (grow, xrow)) in gout.chunks(c).zip(xs.chunks(c)).enumerate() {
                        let dot: T = grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum();
                        d[r] = d[r] + if div { -dot / (ss[r] * ss[r]) } else { dot };
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn op_name(k: OpKind) -> &'static str {
    match k {
        OpKind::Leaf => "leaf",
        OpKind::Param => "param",
        OpKind::MatMul => "matmul",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::ScalarMul => "scalar_mul",
        OpKind::BiasAdd => "bias_add",
        OpKind::Relu => "relu",
        OpKind::MaxZero => "max_with_zero",
        OpKind::RowSoftmax => "row_softmax",
        OpKind::LayerNorm => "layer_norm",
        OpKind::Concat => "concat",
        OpKind::GatherRows => "gather_rows",
        OpKind::GatherCols => "gather_cols",
        OpKind::MeanAxis => "mean_axis",
        OpKind::SumAxis => "sum_axis",
        OpKind::SumAll => "sum_all",
        OpKind::SquaredL2 => "squared_l2",
        OpKind::SmoothL1 => "smooth_l1",
        OpKind::PairwiseSqDist => "pairwise_sq_distances",
        OpKind::MinAxis => "min_axis",
        OpKind::Transpose => "transpose",
        OpKind::Reshape => "reshape",
        OpKind::Exp => "exp",
        OpKind::RowNorm => "row_norm",
        OpKind::MulRows => "mul_rows",
        OpKind::DivRows => "div_rows",
    }
}
