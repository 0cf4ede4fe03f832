//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its value. Operations whose inputs
//! do not require gradients are stored as constants, so the backward sweep
//! only visits the part of the graph that leads to a trainable leaf.
//!
//! Broadcasting is limited to [`Tape::scale`] (scalar times tensor); all
//! other binary operations require identical shapes.

use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { x: Var, s: Var },
    MulConst(Var, T),
    MatVec { w: Var, x: Var },
    MatMul(Var, Var),
    Outer(Var, Var),
    Slice { x: Var, start: usize },
    Row { x: Var, row: usize },
    Concat(Vec<Var>),
    Sum(Var),
    Log(Var),
    Exp(Var),
    ClampMin(Var, T),
    Softmax(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: T,
    },
}

/// Dot product with four interleaved partial sums, so the loop vectorizes.
/// The summation order is fixed, keeping results reproducible.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let split = a.len() - a.len() % 4;
    for (ca, cb) in a[..split].chunks_exact(4).zip(b[..split].chunks_exact(4)) {
        for i in 0..4 {
            acc[i] = acc[i] + ca[i] * cb[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in a[split..].iter().zip(&b[split..]) {
        tail = tail + x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it. A tape is single-threaded; use one tape per episode.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to trainable leaves.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    map: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.map.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.map.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Gradients for `vars` in the given order; missing entries are an error.
    pub fn ordered(mut self, vars: &[Var]) -> Result<Vec<Tensor<T>>> {
        vars.iter()
            .map(|v| {
                self.map.remove(v).ok_or_else(|| {
                    Error::InvalidTensor(format!("no gradient recorded for leaf {}", v.0))
                })
            })
            .collect()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes, keeping the allocation.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Registers a leaf without copying its data.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        let op = if requires_grad { Op::Leaf } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(name, out, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Scalar `s` times tensor `x`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(shape_err("scale", self.shape(x), self.shape(s)));
        }
        let k = self.value(s).item();
        self.unary("scale", x, Op::Scale { x, s }, |v| v * k)
    }

    pub fn mul_const(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("mul_const", x, Op::MulConst(x, c), |v| v * c)
    }

    /// Matrix `[r, c]` times vector `[c]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (vw, vx) = (self.value(w), self.value(x));
        if vw.rank() != 2 || vx.rank() != 1 || vw.cols() != vx.len() {
            return Err(shape_err("matvec", vw.shape(), vx.shape()));
        }
        let cols = vw.cols();
        let xs = vx.data();
        let data: Vec<T> = vw
            .data()
            .chunks_exact(cols)
            .map(|row| dot(row, xs))
            .collect();
        let out = Tensor::vector(data);
        self.push("matvec", out, Op::MatVec { w, x }, &[w, x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows() {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let out_row = &mut data[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = va.data()[i * k + p];
                let b_row = &vb.data()[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + aip * bv;
                }
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Outer product of vectors `[m]` and `[n]`, giving `[m, n]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 1 || vb.rank() != 1 {
            return Err(shape_err("outer", va.shape(), vb.shape()));
        }
        let (m, n) = (va.len(), vb.len());
        let mut data = Vec::with_capacity(m * n);
        for &x in va.data() {
            data.extend(vb.data().iter().map(|&y| x * y));
        }
        let out = Tensor::matrix(m, n, data)?;
        self.push("outer", out, Op::Outer(a, b), &[a, b])
    }

    /// Contiguous slice `[start, start + len)` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 1 || len == 0 || start + len > vx.len() {
            return Err(shape_err("slice", vx.shape(), &[start, len]));
        }
        let out = Tensor::vector(vx.data()[start..start + len].to_vec());
        self.push("slice", out, Op::Slice { x, start }, &[x])
    }

    /// Row `row` of a matrix, as a vector.
    pub fn row(&mut self, x: Var, row: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || row >= vx.rows() {
            return Err(shape_err("row", vx.shape(), &[row]));
        }
        let c = vx.cols();
        let out = Tensor::vector(vx.data()[row * c..(row + 1) * c].to_vec());
        self.push("row", out, Op::Row { x, row }, &[x])
    }

    /// Concatenation of vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidTensor("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            if vp.rank() != 1 {
                return Err(shape_err("concat", vp.shape(), &[]));
            }
            data.extend_from_slice(vp.data());
        }
        let out = Tensor::vector(data);
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, Op::Log(x), |v| v.ln())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x), |v| v.exp())
    }

    pub fn clamp_min(&mut self, x: Var, floor: T) -> Result<Var> {
        self.unary("clamp_min", x, Op::ClampMin(x, floor), |v| v.max(floor))
    }

    /// Softmax over the last axis (rows of a matrix), with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let width = *vx.shape().last().unwrap_or(&1);
        let mut data = Vec::with_capacity(vx.len());
        for row in vx.data().chunks_exact(width) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            data.extend(row.iter().map(|&v| (v - m).exp()));
            let z: T = data[start..].iter().copied().sum();
            for v in &mut data[start..] {
                *v = *v / z;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, Op::Softplus(x), softplus)
    }

    /// Forward identity that blocks gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value_arc(x);
        self.leaf_shared(value, false)
    }

    /// Layer normalization of a vector: `gain * (x - mean) / sqrt(var + eps) + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        self.same_shape("layer_norm", x, gain)?;
        self.same_shape("layer_norm", x, bias)?;
        let vx = self.value(x);
        if vx.rank() != 1 {
            return Err(shape_err("layer_norm", vx.shape(), &[]));
        }
        let n = T::c(vx.len() as f64);
        let mean = vx.sum() / n;
        let var = vx.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv_std = T::one() / (var + eps).sqrt();
        let xhat: Vec<T> = vx.data().iter().map(|&v| (v - mean) * inv_std).collect();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let data = xhat
            .iter()
            .zip(g.iter().zip(b))
            .map(|(&h, (&gv, &bv))| gv * h + bv)
            .collect();
        let out = Tensor::vector(data);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", out, op, &[x, gain, bias])
    }

    /// Gradients of scalar `loss` with respect to every trainable leaf.
    ///
    /// Leaves that `loss` does not depend on receive a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), T::one()));
        let mut map = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let gd = g.data();
            match &node.op {
                Op::Leaf => {
                    map.insert(Var(i), g);
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |s| add_into(s, gd));
                    self.acc(&mut grads, *b, |s| add_into(s, gd));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |s| add_into(s, gd));
                    self.acc(&mut grads, *b, |s| {
                        for (o, &v) in s.iter_mut().zip(gd) {
                            *o = *o - v;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.acc(&mut grads, *a, |s| {
                        for ((o, &gv), &bv) in s.iter_mut().zip(gd).zip(vb) {
                            *o = *o + gv * bv;
                        }
                    });
                    self.acc(&mut grads, *b, |s| {
                        for ((o, &gv), &av) in s.iter_mut().zip(gd).zip(va) {
                            *o = *o + gv * av;
                        }
                    });
                }
                Op::Scale { x, s } => {
                    let k = self.value(*s).item();
                    let vx = self.value(*x).data();
                    self.acc(&mut grads, *x, |o| {
                        for (o, &gv) in o.iter_mut().zip(gd) {
                            *o = *o + gv * k;
                        }
                    });
                    self.acc(&mut grads, *s, |o| {
                        let dot = gd.iter().zip(vx).fold(T::zero(), |acc, (&gv, &xv)| acc + gv * xv);
                        o[0] = o[0] + dot;
                    });
                }
                Op::MulConst(x, c) => {
                    self.acc(&mut grads, *x, |o| {
                        for (o, &gv) in o.iter_mut().zip(gd) {
                            *o = *o + gv * *c;
                        }
                    });
                }
                Op::MatVec { w, x } => {
                    let (vw, vx) = (self.value(*w), self.value(*x).data());
                    let cols = vw.cols();
                    self.acc(&mut grads, *w, |o| {
                        for (row, &gv) in o.chunks_exact_mut(cols).zip(gd) {
                            for (o, &xv) in row.iter_mut().zip(vx) {
                                *o = *o + gv * xv;
                            }
                        }
                    });
                    self.acc(&mut grads, *x, |o| {
                        for (row, &gv) in vw.data().chunks_exact(cols).zip(gd) {
                            for (o, &wv) in o.iter_mut().zip(row) {
                                *o = *o + wv * gv;
                            }
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    self.acc(&mut grads, *a, |o| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = T::zero();
                                for j in 0..n {
                                    acc = acc + gd[i * n + j] * vb.data()[p * n + j];
                                }
                                o[i * k + p] = o[i * k + p] + acc;
                            }
                        }
                    });
                    self.acc(&mut grads, *b, |o| {
                        for p in 0..k {
                            for j in 0..n {
                                let mut acc = T::zero();
                                for i in 0..m {
                                    acc = acc + va.data()[i * k + p] * gd[i * n + j];
                                }
                                o[p * n + j] = o[p * n + j] + acc;
                            }
                        }
                    });
                }
                Op::Outer(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let n = vb.len();
                    self.acc(&mut grads, *a, |o| {
                        for (o, row) in o.iter_mut().zip(gd.chunks_exact(n)) {
                            *o = *o + row.iter().zip(vb).fold(T::zero(), |acc, (&gv, &bv)| acc + gv * bv);
                        }
                    });
                    self.acc(&mut grads, *b, |o| {
                        for (&av, row) in va.iter().zip(gd.chunks_exact(n)) {
                            for (o, &gv) in o.iter_mut().zip(row) {
                                *o = *o + gv * av;
                            }
                        }
                    });
                }
                Op::Slice { x, start } => {
                    let start = *start;
                    self.acc(&mut grads, *x, |o| add_into(&mut o[start..start + gd.len()], gd));
                }
                Op::Row { x, row } => {
                    let c = gd.len();
                    let row = *row;
                    self.acc(&mut grads, *x, |o| add_into(&mut o[row * c..(row + 1) * c], gd));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        self.acc(&mut grads, p, |o| add_into(o, &gd[offset..offset + len]));
                        offset += len;
                    }
                }
                Op::Sum(x) => {
                    let gv = gd[0];
                    self.acc(&mut grads, *x, |o| {
                        for o in o.iter_mut() {
                            *o = *o + gv;
                        }
                    });
                }
                Op::Log(x) => {
                    let vx = self.value(*x).data();
                    self.acc(&mut grads, *x, |o| {
                        for ((o, &gv), &xv) in o.iter_mut().zip(gd).zip(vx) {
                            *o = *o + gv / xv;
                        }
                    });
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    self.acc(&mut grads, *x, |o| {
                        for ((o, &gv), &yv) in o.iter_mut().zip(gd).zip(y) {
                            *o = *o + gv * yv;
                        }
                    });
                }
                Op::ClampMin(x, floor) => {
                    let vx = self.value(*x).data();
                    self.acc(&mut grads, *x, |o| {
                        for ((o, &gv), &xv) in o.iter_mut().zip(gd).zip(vx) {
                            if xv >= *floor {
                                *o = *o + gv;
                            }
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let width = *node.value.shape().last().unwrap_or(&1);
                    self.acc(&mut grads, *x, |o| {
                        for ((o, g), y) in o
                            .chunks_exact_mut(width)
                            .zip(gd.chunks_exact(width))
                            .zip(y.chunks_exact(width))
                        {
                            let dot = g.iter().zip(y).fold(T::zero(), |acc, (&gv, &yv)| acc + gv * yv);
                            for ((o, &gv), &yv) in o.iter_mut().zip(g).zip(y) {
                                *o = *o + yv * (gv - dot);
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    self.acc(&mut grads, *x, |o| {
                        for ((o, &gv), &yv) in o.iter_mut().zip(gd).zip(y) {
                            *o = *o + gv * yv * (T::one() - yv);
                        }
                    });
                }
                Op::Relu(x) => {
                    let vx = self.value(*x).data();
                    self.acc(&mut grads, *x, |o| {
                        for ((o, &gv), &xv) in o.iter_mut().zip(gd).zip(vx) {
                            if xv > T::zero() {
                                *o = *o + gv;
                            }
                        }
                    });
                }
                Op::Softplus(x) => {
                    let vx = self.value(*x).data();
                    self.acc(&mut grads, *x, |o| {
                        for ((o, &gv), &xv) in o.iter_mut().zip(gd).zip(vx) {
                            *o = *o + gv * sigmoid(xv);
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gain_v = self.value(*gain).data();
                    self.acc(&mut grads, *gain, |o| {
                        for ((o, &gv), &h) in o.iter_mut().zip(gd).zip(xhat) {
                            *o = *o + gv * h;
                        }
                    });
                    self.acc(&mut grads, *bias, |o| add_into(o, gd));
                    self.acc(&mut grads, *x, |o| {
                        let n = T::c(gd.len() as f64);
                        let gh: Vec<T> = gd.iter().zip(gain_v).map(|(&a, &b)| a * b).collect();
                        let sum_gh: T = gh.iter().copied().sum();
                        let sum_ghh: T = gh.iter().zip(xhat).map(|(&a, &h)| a * h).sum();
                        for ((o, &ghv), &h) in o.iter_mut().zip(&gh).zip(xhat) {
                            *o = *o + *inv_std / n * (n * ghv - sum_gh - h * sum_ghh);
                        }
                    });
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                map.entry(Var(i)).or_insert_with(|| node.value.zeros_like());
            }
        }
        Ok(Gradients { map })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| node.value.zeros_like());
        f(slot.data_mut());
    }
}

fn add_into<T: Scalar>(out: &mut [T], g: &[T]) {
    for (o, &v) in out.iter_mut().zip(g) {
        *o = *o + v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec64(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(vec64(&[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(vec64(&[1000.0, 1000.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0f64));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn sigmoid_stays_in_open_interval() {
        let mut tape = Tape::new();
        let x = tape.constant(vec64(&[-30.0, -5.0, 5.0, 30.0]));
        let y = tape.sigmoid(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn outer_product_matches_hand_computation() {
        let mut tape = Tape::new();
        let a = tape.constant(vec64(&[1.0, 2.0]));
        let b = tape.constant(vec64(&[3.0, 4.0, 5.0]));
        let o = tape.outer(a, b).unwrap();
        assert_eq!(tape.shape(o), &[2, 3]);
        assert_eq!(tape.value(o).data(), &[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec64(&[1.0, 2.0]));
        let b = tape.constant(vec64(&[1.0, 2.0, 3.0]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(vec64(&[0.0]));
        assert!(matches!(tape.log(a), Err(Error::NonFinite { op: "log" })));
        let b = tape.constant(vec64(&[1000.0]));
        assert!(tape.exp(b).is_err());
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let w = tape.leaf(vec64(&[1.0, 2.0]), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn stop_gradient_treats_one_factor_as_constant() {
        let mut tape = Tape::new();
        let w = tape.leaf(vec64(&[1.0, 2.0]), true);
        let c = tape.stop_gradient(w);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0]);
        let p = tape.mul(c, w).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn sum_of_stop_gradient_has_exactly_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec64(&[1.0, 2.0, 3.0]), true);
        let c = tape.stop_gradient(x);
        let loss = tape.sum(c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().bitwise_eq(&Tensor::zeros(&[3])));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec64(&[1.0]), true);
        let b = tape.leaf(vec64(&[5.0, 6.0]), true);
        let loss = tape.sum(a).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec64(&[1.0, 2.0]), true);
        assert!(matches!(tape.backward(a), Err(Error::NotScalar(_))));
        let empty: Tape<f64> = Tape::new();
        assert!(matches!(empty.backward(Var(0)), Err(Error::EmptyTape)));
    }

    #[test]
    fn constant_inputs_are_not_recorded_as_ops() {
        let mut tape = Tape::new();
        let a = tape.constant(vec64(&[1.0]));
        let b = tape.exp(a).unwrap();
        assert!(!tape.requires_grad(b));
    }
}
