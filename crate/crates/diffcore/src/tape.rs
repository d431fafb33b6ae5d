//! Define-by-run tape.
//!
//! Each primitive executes eagerly, stores its output and whatever it needs
//! for the reverse sweep, and returns a [`Var`] handle. `backward` walks the
//! records once in reverse insertion order, which is a valid topological
//! order because inputs always precede their consumers.

use std::collections::BTreeMap;

use crate::array::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Array, Real};
use crate::error::{DiffError, Result};
use crate::params::{Gradients, ParamId, ParamStore};

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named input arrays for [`Tape::input`].
pub type Inputs<T> = BTreeMap<String, Array<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Bcast),
    Sub(Bcast),
    Mul(Bcast),
    Div(Bcast),
    MatMul,
    MatMulNt,
    Transpose,
    Scale(T),
    AddScalar,
    Exp,
    Log,
    Sqrt,
    Square,
    Relu,
    Gelu,
    Tanh,
    Softmax,
    LogSoftmax,
    LayerNorm(Vec<T>),
    SumAll,
    MeanAll,
    SumLast,
    MeanRows,
    Concat(Axis, Vec<usize>),
    SliceRows(usize),
    SliceCols(usize),
    GatherRows(Vec<usize>),
    Reshape,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(_) => "add",
            Op::Sub(_) => "sub",
            Op::Mul(_) => "mul",
            Op::Div(_) => "div",
            Op::MatMul => "matmul",
            Op::MatMulNt => "matmul_nt",
            Op::Transpose => "transpose",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Tanh => "tanh",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::LayerNorm(_) => "layer_norm",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::SumLast => "sum_last",
            Op::MeanRows => "mean_rows",
            Op::Concat(..) => "concat",
            Op::SliceRows(_) => "slice_rows",
            Op::SliceCols(_) => "slice_cols",
            Op::GatherRows(_) => "gather_rows",
            Op::Reshape => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<usize>,
    value: Array<T>,
    needs_grad: bool,
}

/// Ordered record of primitives.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn bcast_kind(op: &'static str, a: &[usize], ar: usize, ac: usize, b: &Array<impl Real>) -> Result<Bcast> {
    let (br, bc) = (b.rows(), b.cols());
    if ar * ac == 1 && b.len() == 1 {
        Ok(Bcast::Same)
    } else if b.len() == 1 {
        Ok(Bcast::Scalar)
    } else if br == ar && bc == ac {
        Ok(Bcast::Same)
    } else if br == 1 && bc == ac {
        Ok(Bcast::Row)
    } else if bc == 1 && br == ar {
        Ok(Bcast::Col)
    } else {
        Err(DiffError::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

#[inline]
fn bidx(kind: Bcast, i: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
        Bcast::Scalar => 0,
    }
}

fn gelu<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let du = c * (T::one() + three * k * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * du;
    (y, dy)
}

impl<T: Real> Tape<T> {
    /// A tape that records everything needed for `backward`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// Forward-only evaluation; `backward` is rejected.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<usize>, value: Array<T>) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op.name(), node: id });
        }
        let needs_grad = self.record
            && (matches!(op, Op::Param(_)) || inputs.iter().any(|&i| self.nodes[i].needs_grad));
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        Ok(Var(id))
    }

    // ----- leaves -----

    pub fn constant(&mut self, value: Array<T>) -> Result<Var> {
        self.push(Op::Leaf, vec![], value)
    }

    /// Looks up a named input.
    pub fn input(&mut self, name: &str, inputs: &Inputs<T>) -> Result<Var> {
        let a = inputs
            .get(name)
            .ok_or_else(|| DiffError::MissingInput(name.to_string()))?;
        self.constant(a.clone())
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.push(Op::Param(id), vec![], store.get(id).clone())
    }

    /// Same value, but no gradient flows back through the result.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let v = self.nodes[x.0].value.clone();
        self.push(Op::Leaf, vec![], v)
    }

    // ----- element-wise binary -----

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Bcast, Array<T>)> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (ar, ac) = (av.rows(), av.cols());
        let kind = bcast_kind(name, av.shape(), ar, ac, bv)?;
        let bd = bv.data();
        let out: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[bidx(kind, i, ac)]))
            .collect();
        Ok((kind, Array::new(av.shape().to_vec(), out)?))
    }

    /// `a + b`; `b` may be a scalar, a row vector, a column vector or match `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, v) = self.binary("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(k), vec![a.0, b.0], v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, v) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(k), vec![a.0, b.0], v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, v) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(k), vec![a.0, b.0], v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, v) = self.binary("div", a, b, |x, y| x / y)?;
        self.push(Op::Div(k), vec![a.0, b.0], v)
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (m, k) = (av.rows(), av.cols());
        let n = bv.cols();
        if bv.rows() != k {
            return Err(DiffError::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let v = Array::new(vec![m, n], out)?;
        self.push(Op::MatMul, vec![a.0, b.0], v)
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (m, k) = (av.rows(), av.cols());
        let n = bv.rows();
        if bv.cols() != k {
            return Err(DiffError::Shape {
                op: "matmul_nt",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt_acc(av.data(), bv.data(), &mut out, m, k, n);
        let v = Array::new(vec![m, n], out)?;
        self.push(Op::MatMulNt, vec![a.0, b.0], v)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        let d = av.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let v = Array::new(vec![c, r], out)?;
        self.push(Op::Transpose, vec![a.0], v)
    }

    // ----- unary -----

    fn unary(&mut self, op: Op<T>, a: Var, f: impl Fn(T) -> T) -> Result<Var> {
        let v = self.nodes[a.0].value.map(f);
        self.push(op, vec![a.0], v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary(Op::Scale(c), a, |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary(Op::AddScalar, a, |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp, a, |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Log, a, |x| x.ln())
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sqrt, a, |x| x.sqrt())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Square, a, |x| x * x)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Relu, a, |x| x.max(T::zero()))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Gelu, a, |x| gelu(x).0)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Tanh, a, |x| x.tanh())
    }

    // ----- row-wise normalizers -----

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let c = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let v = Array::new(av.shape().to_vec(), out)?;
        self.push(Op::Softmax, vec![a.0], v)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let c = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let s: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + s.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let v = Array::new(av.shape().to_vec(), out)?;
        self.push(Op::LogSoftmax, vec![a.0], v)
    }

    /// Layer normalization over the last axis, without affine terms.
    /// A constant row maps to zeros.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let c = av.cols();
        let n = T::of(c as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut out = av.data().to_vec();
        let mut inv_std = Vec::with_capacity(av.rows());
        for row in out.chunks_mut(c.max(1)) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Array::new(av.shape().to_vec(), out)?;
        self.push(Op::LayerNorm(inv_std), vec![a.0], v)
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.nodes[a.0].value.data().iter().copied().sum();
        self.push(Op::SumAll, vec![a.0], Array::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let s: T = av.data().iter().copied().sum();
        let m = s / T::of(av.len() as f64);
        self.push(Op::MeanAll, vec![a.0], Array::scalar(m))
    }

    /// Sum over the last axis, keeping it as size 1.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let c = av.cols();
        let out: Vec<T> = av.data().chunks(c.max(1)).map(|r| r.iter().copied().sum()).collect();
        let v = Array::new(vec![av.rows(), 1], out)?;
        self.push(Op::SumLast, vec![a.0], v)
    }

    /// Mean over rows, giving a `[1, cols]` array.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        if r == 0 {
            return Err(DiffError::Invalid("mean_rows of an empty array".into()));
        }
        let mut out = vec![T::zero(); c];
        for row in av.data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(r as f64);
        for o in &mut out {
            *o *= inv;
        }
        let v = Array::new(vec![1, c], out)?;
        self.push(Op::MeanRows, vec![a.0], v)
    }

    // ----- structure -----

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(DiffError::Invalid("concat of zero arrays".into()));
        }
        let first = &self.nodes[parts[0].0].value;
        let (r0, c0) = (first.rows(), first.cols());
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let v = &self.nodes[p.0].value;
            let ok = match axis {
                Axis::Rows => v.cols() == c0,
                Axis::Cols => v.rows() == r0,
            };
            if !ok {
                return Err(DiffError::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            sizes.push(match axis {
                Axis::Rows => v.rows(),
                Axis::Cols => v.cols(),
            });
        }
        let total: usize = sizes.iter().sum();
        let v = match axis {
            Axis::Rows => {
                let mut out = Vec::with_capacity(total * c0);
                for p in parts {
                    out.extend_from_slice(self.nodes[p.0].value.data());
                }
                Array::new(vec![total, c0], out)?
            }
            Axis::Cols => {
                let mut out = vec![T::zero(); r0 * total];
                let mut off = 0;
                for (p, &w) in parts.iter().zip(&sizes) {
                    let d = self.nodes[p.0].value.data();
                    for i in 0..r0 {
                        out[i * total + off..i * total + off + w].copy_from_slice(&d[i * w..(i + 1) * w]);
                    }
                    off += w;
                }
                Array::new(vec![r0, total], out)?
            }
        };
        self.push(Op::Concat(axis, sizes), parts.iter().map(|p| p.0).collect(), v)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let c = av.cols();
        if start > end || end > av.rows() {
            return Err(DiffError::Shape {
                op: "slice_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let v = Array::new(vec![end - start, c], av.data()[start * c..end * c].to_vec())?;
        self.push(Op::SliceRows(start), vec![a.0], v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        if start > end || end > c {
            return Err(DiffError::Shape {
                op: "slice_cols",
                lhs: av.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let d = av.data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + end]);
        }
        let v = Array::new(vec![r, w], out)?;
        self.push(Op::SliceCols(start), vec![a.0], v)
    }

    /// Row lookup (`table[idx[i]]`), used for embeddings and reordering.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        let (r, c) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(DiffError::Shape {
                    op: "gather_rows",
                    lhs: tv.shape().to_vec(),
                    rhs: vec![i],
                });
            }
            out.extend_from_slice(tv.row(i));
        }
        let v = Array::new(vec![idx.len(), c], out)?;
        self.push(Op::GatherRows(idx.to_vec()), vec![table.0], v)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.nodes[a.0].value.clone().reshaped(shape)?;
        self.push(Op::Reshape, vec![a.0], v)
    }

    // ----- reverse sweep -----

    /// Gradients of a scalar `loss` with respect to every parameter in
    /// `store`. Parameters the loss does not reach get exact zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        if !self.record {
            return Err(DiffError::NotRecording);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(DiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut out = Gradients::zeros_like(store);
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(pid) = node.op {
                out.accumulate(pid, &g);
                continue;
            }
            let contribs = self.node_backward(id, &g);
            for (inp, cg) in node.inputs.iter().zip(contribs) {
                let Some(cg) = cg else { continue };
                if !self.nodes[*inp].needs_grad {
                    continue;
                }
                if cg.iter().any(|v| !v.is_finite()) {
                    return Err(DiffError::NonFiniteGrad {
                        op: node.op.name(),
                        node: id,
                    });
                }
                match &mut grads[*inp] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&cg) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        Ok(out)
    }

    fn reduce_to(kind: Bcast, g: &[T], cols: usize, b_len: usize) -> Vec<T> {
        match kind {
            Bcast::Same => g.to_vec(),
            _ => {
                let mut out = vec![T::zero(); b_len];
                for (i, &v) in g.iter().enumerate() {
                    out[bidx(kind, i, cols)] += v;
                }
                out
            }
        }
    }

    fn node_backward(&self, id: usize, g: &[T]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[id];
        let y = node.value.data();
        let inp = |k: usize| &self.nodes[node.inputs[k]].value;
        let want = |k: usize| self.nodes[node.inputs[k]].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(kind) | Op::Sub(kind) => {
                let b = inp(1);
                let ga = want(0).then(|| g.to_vec());
                let gb = want(1).then(|| {
                    let mut r = Self::reduce_to(*kind, g, node.value.cols(), b.len());
                    if matches!(node.op, Op::Sub(_)) {
                        for v in &mut r {
                            *v = -*v;
                        }
                    }
                    r
                });
                vec![ga, gb]
            }
            Op::Mul(kind) => {
                let (a, b) = (inp(0), inp(1));
                let cols = node.value.cols();
                let (ad, bd) = (a.data(), b.data());
                let ga = want(0).then(|| {
                    g.iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * bd[bidx(*kind, i, cols)])
                        .collect()
                });
                let gb = want(1).then(|| {
                    let prod: Vec<T> = g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect();
                    Self::reduce_to(*kind, &prod, cols, b.len())
                });
                vec![ga, gb]
            }
            Op::Div(kind) => {
                let (a, b) = (inp(0), inp(1));
                let cols = node.value.cols();
                let (ad, bd) = (a.data(), b.data());
                let ga = want(0).then(|| {
                    g.iter()
                        .enumerate()
                        .map(|(i, &gv)| gv / bd[bidx(*kind, i, cols)])
                        .collect()
                });
                let gb = want(1).then(|| {
                    let prod: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| {
                            let bv = bd[bidx(*kind, i, cols)];
                            -gv * ad[i] / (bv * bv)
                        })
                        .collect();
                    Self::reduce_to(*kind, &prod, cols, b.len())
                });
                vec![ga, gb]
            }
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let ga = want(0).then(|| {
                    let mut r = vec![T::zero(); m * k];
                    gemm_nt_acc(g, b.data(), &mut r, m, n, k);
                    r
                });
                let gb = want(1).then(|| {
                    let mut r = vec![T::zero(); k * n];
                    gemm_tn_acc(a.data(), g, &mut r, m, k, n);
                    r
                });
                vec![ga, gb]
            }
            Op::MatMulNt => {
                // y[m,n] = a[m,k] b[n,k]^T
                let (a, b) = (inp(0), inp(1));
                let (m, k, n) = (a.rows(), a.cols(), b.rows());
                let ga = want(0).then(|| {
                    let mut r = vec![T::zero(); m * k];
                    gemm_acc(g, b.data(), &mut r, m, n, k);
                    r
                });
                let gb = want(1).then(|| {
                    let mut r = vec![T::zero(); n * k];
                    gemm_tn_acc(g, a.data(), &mut r, m, n, k);
                    r
                });
                vec![ga, gb]
            }
            Op::Transpose => {
                let (r, c) = (inp(0).rows(), inp(0).cols());
                let mut out = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(out)]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|&v| v * *c).collect())],
            Op::AddScalar | Op::Reshape => vec![Some(g.to_vec())],
            Op::Exp => vec![Some(g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect())],
            Op::Log => vec![Some(
                g.iter().zip(inp(0).data()).map(|(&gv, &xv)| gv / xv).collect(),
            )],
            Op::Sqrt => {
                let half = T::of(0.5);
                vec![Some(g.iter().zip(y).map(|(&gv, &yv)| gv * half / yv).collect())]
            }
            Op::Square => {
                let two = T::of(2.0);
                vec![Some(
                    g.iter().zip(inp(0).data()).map(|(&gv, &xv)| two * xv * gv).collect(),
                )]
            }
            Op::Relu => vec![Some(
                g.iter()
                    .zip(inp(0).data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect(),
            )],
            Op::Gelu => vec![Some(
                g.iter().zip(inp(0).data()).map(|(&gv, &xv)| gv * gelu(xv).1).collect(),
            )],
            Op::Tanh => vec![Some(
                g.iter().zip(y).map(|(&gv, &yv)| gv * (T::one() - yv * yv)).collect(),
            )],
            Op::Softmax => {
                let c = node.value.cols().max(1);
                let mut out = vec![T::zero(); y.len()];
                for ((o, yr), gr) in out.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = yv * (gv - dot);
                    }
                }
                vec![Some(out)]
            }
            Op::LogSoftmax => {
                let c = node.value.cols().max(1);
                let mut out = vec![T::zero(); y.len()];
                for ((o, yr), gr) in out.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let gs: T = gr.iter().copied().sum();
                    for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = gv - yv.exp() * gs;
                    }
                }
                vec![Some(out)]
            }
            Op::LayerNorm(inv_std) => {
                let c = node.value.cols().max(1);
                let n = T::of(c as f64);
                let mut out = vec![T::zero(); y.len()];
                for (((o, yr), gr), &is) in out
                    .chunks_mut(c)
                    .zip(y.chunks(c))
                    .zip(g.chunks(c))
                    .zip(inv_std)
                {
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = is * (gv - mg - yv * mgy);
                    }
                }
                vec![Some(out)]
            }
            Op::SumAll => vec![Some(vec![g[0]; inp(0).len()])],
            Op::MeanAll => {
                let n = inp(0).len();
                vec![Some(vec![g[0] / T::of(n as f64); n])]
            }
            Op::SumLast => {
                let c = inp(0).cols();
                let mut out = Vec::with_capacity(inp(0).len());
                for &gv in g {
                    out.extend(std::iter::repeat_n(gv, c));
                }
                vec![Some(out)]
            }
            Op::MeanRows => {
                let (r, c) = (inp(0).rows(), inp(0).cols());
                let inv = T::one() / T::of(r as f64);
                let row: Vec<T> = g.iter().map(|&v| v * inv).collect();
                let mut out = Vec::with_capacity(r * c);
                for _ in 0..r {
                    out.extend_from_slice(&row);
                }
                vec![Some(out)]
            }
            Op::Concat(axis, sizes) => {
                let total: usize = sizes.iter().sum();
                let mut res = Vec::with_capacity(sizes.len());
                match axis {
                    Axis::Rows => {
                        let c = node.value.cols();
                        let mut off = 0;
                        for (k, &s) in sizes.iter().enumerate() {
                            res.push(want(k).then(|| g[off * c..(off + s) * c].to_vec()));
                            off += s;
                        }
                    }
                    Axis::Cols => {
                        let r = node.value.rows();
                        let mut off = 0;
                        for (k, &w) in sizes.iter().enumerate() {
                            res.push(want(k).then(|| {
                                let mut o = Vec::with_capacity(r * w);
                                for i in 0..r {
                                    o.extend_from_slice(&g[i * total + off..i * total + off + w]);
                                }
                                o
                            }));
                            off += w;
                        }
                    }
                }
                res
            }
            Op::SliceRows(start) => {
                let a = inp(0);
                let c = a.cols();
                let mut out = vec![T::zero(); a.len()];
                out[start * c..start * c + g.len()].copy_from_slice(g);
                vec![Some(out)]
            }
            Op::SliceCols(start) => {
                let a = inp(0);
                let (r, c) = (a.rows(), a.cols());
                let w = node.value.cols();
                let mut out = vec![T::zero(); a.len()];
                for i in 0..r {
                    out[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![Some(out)]
            }
            Op::GatherRows(idx) => {
                let a = inp(0);
                let c = a.cols();
                let mut out = vec![T::zero(); a.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &gv) in out[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                        *o += gv;
                    }
                }
                vec![Some(out)]
            }
        }
    }
}
