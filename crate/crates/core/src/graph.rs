//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the graph in execution order, so the
//! node list is already a topological order and [`Graph::backward`] visits
//! each node once, last to first. Leaves created with [`Graph::leaf`] keep a
//! persistent gradient buffer; a second `backward` call adds to it.
//! [`Graph::zero_grad`] clears the buffers.
//!
//! Binary elementwise operations broadcast numpy-style: shapes are aligned
//! on the right and each pair of extents must be equal or one of them 1.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Batch-norm variance epsilon.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in a batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
    Min,
}

/// Per-feature batch mean and (population) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Running mean/variance maintained by batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(features: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); features],
            var: vec![T::one(); features],
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch: &Moments<T>) {
        blend(&mut self.mean, &batch.mean);
        blend(&mut self.var, &batch.var);
    }
}

pub(crate) fn blend<T: Real>(running: &mut [T], batch: &[T]) {
    let m = T::lit(BN_MOMENTUM);
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = m * *r + (T::one() - m) * b;
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Swish,
    Ln,
    Square,
    Sqrt,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Constant,
    Binary(Binary, Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reduce {
        x: Var,
        axis: usize,
        kind: ReduceKind,
        arg: Vec<usize>,
    },
    L2Norm {
        x: Var,
        axis: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

/// A computation graph confined to one thread.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `input` mapped into the index space of `out`, zero on
/// broadcast dimensions.
fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(input);
    let offset = out.len() - input.len();
    (0..out.len())
        .map(|i| {
            if i < offset || input[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
/// The innermost axis runs as a plain loop; the odometer only steps the
/// outer axes.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ea, eb) = (sa[rank - 1], sb[rank - 1]);
    let rows = numel(&out[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    for r in 0..rows {
        let o0 = r * inner;
        for t in 0..inner {
            f(o0 + t, ia + t * ea, ib + t * eb);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Accumulates into the adjoint of `p`, allocating a zero buffer first.
fn add_into<T: Real>(
    adj: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    p: Var,
    f: impl FnOnce(&mut [T]),
) {
    let node = &nodes[p.0];
    if !node.tracked {
        return;
    }
    let buf = adj[p.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]);
    f(buf);
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let tracked = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            Op::Binary(_, a, b) | Op::MatMul(a, b) => self.tracked(*a) || self.tracked(*b),
            Op::Conv2d { input, kernel, .. } => self.tracked(*input) || self.tracked(*kernel),
            Op::BatchNorm { x, gamma, beta, .. } => {
                self.tracked(*x) || self.tracked(*gamma) || self.tracked(*beta)
            }
            Op::Concat { inputs, .. } => inputs.iter().any(|v| self.tracked(*v)),
            Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Unary(_, x)
            | Op::Reshape(x)
            | Op::Softmax { x, .. }
            | Op::Permute { x, .. }
            | Op::Reduce { x, .. }
            | Op::L2Norm { x, .. } => self.tracked(*x),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push("leaf", t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
            .expect("tensor values must be finite")
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push("constant", t.shape().to_vec(), t.data().to_vec(), Op::Constant)
            .expect("tensor values must be finite")
    }

    /// Enters a tensor as a leaf or constant according to its `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        if t.requires_grad() {
            self.leaf(t)
        } else {
            self.constant(t)
        }
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::dim("constant", shape, &[data.len()]));
        }
        self.push("constant", shape.to_vec(), data, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone()).expect("node shape")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (name, f): (&'static str, fn(T, T) -> T) = match kind {
            Binary::Add => ("add", |x, y| x + y),
            Binary::Sub => ("sub", |x, y| x - y),
            Binary::Mul => ("mul", |x, y| x * y),
            Binary::Div => ("div", |x, y| x / y),
        };
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::dim(name, sa, sb))?;
        let va = self.value(a);
        let vb = self.value(b);
        let value = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![T::zero(); numel(&out_shape)];
            let ta = broadcast_strides(sa, &out_shape);
            let tb = broadcast_strides(sb, &out_shape);
            for_each_broadcast(&out_shape, &ta, &tb, |o, i, j| out[o] = f(va[i], vb[j]));
            out
        };
        self.push(name, out_shape, value, Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).iter().map(|&v| v + c).collect();
        self.push("add_scalar", self.shape(x).to_vec(), value, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).iter().map(|&v| v * c).collect();
        self.push("scale", self.shape(x).to_vec(), value, Op::MulScalar(x, c))
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let (name, f): (&'static str, fn(T) -> T) = match kind {
            Unary::Relu => ("relu", |v| if v > T::zero() { v } else { T::zero() }),
            Unary::Sigmoid => ("sigmoid", sigmoid),
            Unary::Swish => ("swish", |v| v * sigmoid(v)),
            Unary::Ln => ("ln", |v| v.ln()),
            Unary::Square => ("square", |v| v * v),
            Unary::Sqrt => ("sqrt", |v| v.sqrt()),
        };
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(name, self.shape(x).to_vec(), value, Op::Unary(kind, x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Swish, x)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Ln, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    // ---- linear algebra ----------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`, or batched `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([bs, m, k], [bs2, k2, n]) if k == k2 && bs == bs2 => (*bs, *m, *k, *n),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let a0 = bi * m * k;
            let b0 = bi * k * n;
            let o0 = bi * m * n;
            for i in 0..m {
                let row = &mut out[o0 + i * n..o0 + (i + 1) * n];
                for p in 0..k {
                    let av = va[a0 + i * k + p];
                    let brow = &vb[b0 + p * n..b0 + (p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o = *o + av * bv;
                    }
                }
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.push("matmul", shape, out, Op::MatMul(a, b))
    }

    /// Valid (unpadded) cross-correlation of `[b,c,h,w]` with `[f,c,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let ok = si.len() == 4
            && sk.len() == 4
            && si[1] == sk[1]
            && sk[2] <= si[2]
            && sk[3] <= si[3]
            && stride >= 1;
        if !ok {
            return Err(Error::dim("conv2d", &si, &sk));
        }
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let geom = ConvGeom { c, h, w, kh, kw, stride, oh, ow };
        let x = self.value(input);
        let k = self.value(kernel);
        let (rows, cols) = (c * kh * kw, oh * ow);
        let mut out = vec![T::zero(); b * f * cols];
        let mut patches = vec![T::zero(); rows * cols];
        for bi in 0..b {
            geom.im2col(&x[bi * c * h * w..(bi + 1) * c * h * w], &mut patches);
            for fi in 0..f {
                let o = &mut out[(bi * f + fi) * cols..(bi * f + fi + 1) * cols];
                for (r, &kv) in k[fi * rows..(fi + 1) * rows].iter().enumerate() {
                    for (acc, &pv) in o.iter_mut().zip(&patches[r * cols..(r + 1) * cols]) {
                        *acc = *acc + kv * pv;
                    }
                }
            }
        }
        self.push(
            "conv2d",
            vec![b, f, oh, ow],
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
            },
        )
    }

    // ---- axis operations ---------------------------------------------

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::Axis {
                axis,
                shape: self.shape(x).to_vec(),
            });
        }
        Ok(())
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x);
        let mut out = vec![T::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut mx = T::neg_infinity();
                for k in 0..len {
                    mx = mx.max(v[at(k)]);
                }
                let mut sum = T::zero();
                for k in 0..len {
                    let e = (v[at(k)] - mx).exp();
                    out[at(k)] = e;
                    sum = sum + e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / sum;
                }
            }
        }
        self.push("softmax", shape, out, Op::Softmax { x, axis })
    }

    fn reduce(&mut self, x: Var, axis: usize, kind: ReduceKind) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = Vec::new();
        if matches!(kind, ReduceKind::Max | ReduceKind::Min) {
            arg = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let slot = o * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut acc = T::zero();
                        for k in 0..len {
                            acc = acc + v[at(k)];
                        }
                        if kind == ReduceKind::Mean {
                            acc = acc / T::lit(len as f64);
                        }
                        out[slot] = acc;
                    }
                    ReduceKind::Max | ReduceKind::Min => {
                        let mut best = 0;
                        for k in 1..len {
                            let better = if kind == ReduceKind::Max {
                                v[at(k)] > v[at(best)]
                            } else {
                                v[at(k)] < v[at(best)]
                            };
                            if better {
                                best = k;
                            }
                        }
                        arg[slot] = best;
                        out[slot] = v[at(best)];
                    }
                }
            }
        }
        let mut out_shape: Vec<usize> = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let name = match kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
            ReduceKind::Max => "max",
            ReduceKind::Min => "min",
        };
        self.push(name, out_shape, out, Op::Reduce { x, axis, kind, arg })
    }

    /// Reductions drop `axis`; reducing a 1-D tensor yields shape `[1]`.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, ReduceKind::Sum)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, ReduceKind::Mean)
    }

    /// Ties resolve to the first extremal index.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, ReduceKind::Max)
    }

    pub fn min(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, ReduceKind::Min)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0)
    }

    /// Euclidean norm along `axis`; the gradient at a zero slice is zero.
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = T::zero();
                for k in 0..len {
                    let e = v[(o * len + k) * inner + i];
                    acc = acc + e * e;
                }
                out[o * inner + i] = acc.sqrt();
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push("l2_norm", out_shape, out, Op::L2Norm { x, axis })
    }

    // ---- layout --------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), value, Op::Reshape(x))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&a| a < shape.len() && !core::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::dim("permute", &shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(&shape);
        let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let v = self.value(x);
        let mut out = vec![T::zero(); v.len()];
        let zero = vec![0; out_shape.len()];
        for_each_broadcast(&out_shape, &mapped, &zero, |o, i, _| out[o] = v[i]);
        self.push(
            "permute",
            out_shape,
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        self.check_axis(*first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            "concat",
            out_shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    // ---- normalization -------------------------------------------------

    /// Batch normalization over every axis but the last (feature) axis.
    ///
    /// In train mode the batch moments are used and returned so the caller
    /// can fold them into its running statistics; eval mode normalizes with
    /// the given running statistics.
    pub fn batch_norm_moments(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        mode: Mode,
    ) -> Result<(Var, Option<Moments<T>>)> {
        let shape = self.shape(x).to_vec();
        let features = *shape.last().unwrap_or(&0);
        let param_ok = |s: &[usize]| s == [features];
        if shape.len() < 2
            || !param_ok(self.shape(gamma))
            || !param_ok(self.shape(beta))
            || running_mean.len() != features
            || running_var.len() != features
        {
            return Err(Error::dim("batch_norm", &shape, self.shape(gamma)));
        }
        if mode == Mode::Train && shape[0] < 2 {
            return Err(Error::config("batch norm in train mode needs a batch of at least 2"));
        }
        let rows = numel(&shape) / features;
        let v = self.value(x);
        let eps = T::lit(BN_EPSILON);
        let (mean, var) = match mode {
            Mode::Train => {
                let n = T::lit(rows as f64);
                let mut mean = vec![T::zero(); features];
                for r in 0..rows {
                    for j in 0..features {
                        mean[j] = mean[j] + v[r * features + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![T::zero(); features];
                for r in 0..rows {
                    for j in 0..features {
                        let d = v[r * features + j] - mean[j];
                        var[j] = var[j] + d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s = *s / n);
                (mean, var)
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![T::zero(); v.len()];
        let mut out = vec![T::zero(); v.len()];
        for r in 0..rows {
            for j in 0..features {
                let i = r * features + j;
                xhat[i] = (v[i] - mean[j]) * inv_std[j];
                out[i] = g[j] * xhat[i] + b[j];
            }
        }
        let moments = (mode == Mode::Train).then_some(Moments { mean, var });
        let y = self.push(
            "batch_norm",
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        )?;
        Ok((y, moments))
    }

    /// Batch norm that updates `stats` in place when training.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (y, moments) = self.batch_norm_moments(x, gamma, beta, &stats.mean, &stats.var, mode)?;
        if let Some(m) = moments {
            stats.update(&m);
        }
        Ok(y)
    }

    // ---- backward ------------------------------------------------------

    /// Accumulates d(loss)/d(leaf) into every leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let nodes = &self.nodes;
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Leaf => match &mut self.leaf_grads[id] {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(g),
                },
                Op::Binary(kind, a, b) => {
                    backward_binary(&mut adj, nodes, *kind, *a, *b, &node.shape, &g)
                }
                Op::AddScalar(x) => add_into(&mut adj, nodes, *x, |buf| {
                    buf.iter_mut().zip(&g).for_each(|(a, &d)| *a = *a + d)
                }),
                Op::MulScalar(x, c) => add_into(&mut adj, nodes, *x, |buf| {
                    buf.iter_mut().zip(&g).for_each(|(a, &d)| *a = *a + d * *c)
                }),
                Op::Unary(kind, x) => {
                    let xv = &nodes[x.0].value;
                    let yv = &node.value;
                    let kind = *kind;
                    add_into(&mut adj, nodes, *x, |buf| {
                        for i in 0..buf.len() {
                            let d = match kind {
                                Unary::Relu => {
                                    if xv[i] > T::zero() {
                                        T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                                Unary::Sigmoid => yv[i] * (T::one() - yv[i]),
                                Unary::Swish => {
                                    let s = sigmoid(xv[i]);
                                    s + xv[i] * s * (T::one() - s)
                                }
                                Unary::Ln => T::one() / xv[i],
                                Unary::Square => T::lit(2.0) * xv[i],
                                Unary::Sqrt => T::lit(0.5) / yv[i],
                            };
                            buf[i] = buf[i] + g[i] * d;
                        }
                    })
                }
                Op::MatMul(a, b) => backward_matmul(&mut adj, nodes, *a, *b, &g),
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                } => backward_conv(&mut adj, nodes, *input, *kernel, *stride, &node.shape, &g),
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = split_axis(&node.shape, *axis);
                    let y = &node.value;
                    add_into(&mut adj, nodes, *x, |buf| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |k: usize| (o * len + k) * inner + i;
                                let mut dot = T::zero();
                                for k in 0..len {
                                    dot = dot + g[at(k)] * y[at(k)];
                                }
                                for k in 0..len {
                                    buf[at(k)] = buf[at(k)] + y[at(k)] * (g[at(k)] - dot);
                                }
                            }
                        }
                    })
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let features = inv_std.len();
                    let rows = g.len() / features;
                    let mut sum_g = vec![T::zero(); features];
                    let mut sum_gx = vec![T::zero(); features];
                    for r in 0..rows {
                        for j in 0..features {
                            let i = r * features + j;
                            sum_g[j] = sum_g[j] + g[i];
                            sum_gx[j] = sum_gx[j] + g[i] * xhat[i];
                        }
                    }
                    add_into(&mut adj, nodes, *beta, |buf| {
                        buf.iter_mut().zip(&sum_g).for_each(|(a, &d)| *a = *a + d)
                    });
                    add_into(&mut adj, nodes, *gamma, |buf| {
                        buf.iter_mut().zip(&sum_gx).for_each(|(a, &d)| *a = *a + d)
                    });
                    let gam = &nodes[gamma.0].value;
                    let n = T::lit(rows as f64);
                    add_into(&mut adj, nodes, *x, |buf| {
                        for r in 0..rows {
                            for j in 0..features {
                                let i = r * features + j;
                                let d = if *batch_stats {
                                    gam[j] * inv_std[j] / n
                                        * (n * g[i] - sum_g[j] - xhat[i] * sum_gx[j])
                                } else {
                                    g[i] * gam[j] * inv_std[j]
                                };
                                buf[i] = buf[i] + d;
                            }
                        }
                    })
                }
                Op::Reshape(x) => add_into(&mut adj, nodes, *x, |buf| {
                    buf.iter_mut().zip(&g).for_each(|(a, &d)| *a = *a + d)
                }),
                Op::Permute { x, axes } => {
                    let in_strides = strides(&nodes[x.0].shape);
                    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
                    let zero = vec![0; axes.len()];
                    add_into(&mut adj, nodes, *x, |buf| {
                        for_each_broadcast(&node.shape, &mapped, &zero, |o, i, _| {
                            buf[i] = buf[i] + g[o]
                        })
                    })
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = split_axis(&node.shape, *axis);
                    let mut start = 0;
                    for &v in inputs {
                        let len = nodes[v.0].shape[*axis];
                        let chunk = len * inner;
                        add_into(&mut adj, nodes, v, |buf| {
                            for o in 0..outer {
                                let src = o * total * inner + start * inner;
                                for c in 0..chunk {
                                    buf[o * chunk + c] = buf[o * chunk + c] + g[src + c];
                                }
                            }
                        });
                        start += len;
                    }
                }
                Op::Reduce { x, axis, kind, arg } => {
                    let (outer, len, inner) = split_axis(&nodes[x.0].shape, *axis);
                    add_into(&mut adj, nodes, *x, |buf| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let slot = o * inner + i;
                                let go = g[slot];
                                match kind {
                                    ReduceKind::Sum | ReduceKind::Mean => {
                                        let d = if *kind == ReduceKind::Mean {
                                            go / T::lit(len as f64)
                                        } else {
                                            go
                                        };
                                        for k in 0..len {
                                            let at = (o * len + k) * inner + i;
                                            buf[at] = buf[at] + d;
                                        }
                                    }
                                    ReduceKind::Max | ReduceKind::Min => {
                                        let at = (o * len + arg[slot]) * inner + i;
                                        buf[at] = buf[at] + go;
                                    }
                                }
                            }
                        }
                    })
                }
                Op::L2Norm { x, axis } => {
                    let (outer, len, inner) = split_axis(&nodes[x.0].shape, *axis);
                    let xv = &nodes[x.0].value;
                    let y = &node.value;
                    add_into(&mut adj, nodes, *x, |buf| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let slot = o * inner + i;
                                if y[slot] == T::zero() {
                                    continue;
                                }
                                let scale = g[slot] / y[slot];
                                for k in 0..len {
                                    let at = (o * len + k) * inner + i;
                                    buf[at] = buf[at] + scale * xv[at];
                                }
                            }
                        }
                    })
                }
            }
        }
        Ok(())
    }
}

fn backward_binary<T: Real>(
    adj: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    kind: Binary,
    a: Var,
    b: Var,
    out_shape: &[usize],
    g: &[T],
) {
    let va = &nodes[a.0].value;
    let vb = &nodes[b.0].value;
    let sa = &nodes[a.0].shape;
    let sb = &nodes[b.0].shape;
    let da = |_x: T, y: T| match kind {
        Binary::Add | Binary::Sub => T::one(),
        Binary::Mul => y,
        Binary::Div => T::one() / y,
    };
    let db = |x: T, y: T| match kind {
        Binary::Add => T::one(),
        Binary::Sub => -T::one(),
        Binary::Mul => x,
        Binary::Div => -x / (y * y),
    };
    if sa == sb {
        add_into(adj, nodes, a, |buf| {
            for i in 0..buf.len() {
                buf[i] = buf[i] + g[i] * da(va[i], vb[i]);
            }
        });
        add_into(adj, nodes, b, |buf| {
            for i in 0..buf.len() {
                buf[i] = buf[i] + g[i] * db(va[i], vb[i]);
            }
        });
        return;
    }
    let ta = broadcast_strides(sa, out_shape);
    let tb = broadcast_strides(sb, out_shape);
    add_into(adj, nodes, a, |buf| {
        for_each_broadcast(out_shape, &ta, &tb, |o, i, j| {
            buf[i] = buf[i] + g[o] * da(va[i], vb[j])
        })
    });
    add_into(adj, nodes, b, |buf| {
        for_each_broadcast(out_shape, &ta, &tb, |o, i, j| {
            buf[j] = buf[j] + g[o] * db(va[i], vb[j])
        })
    });
}

fn backward_matmul<T: Real>(
    adj: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    a: Var,
    b: Var,
    g: &[T],
) {
    let sa = &nodes[a.0].shape;
    let sb = &nodes[b.0].shape;
    let (batch, m, k) = if sa.len() == 2 {
        (1, sa[0], sa[1])
    } else {
        (sa[0], sa[1], sa[2])
    };
    let n = *sb.last().unwrap();
    let va = &nodes[a.0].value;
    let vb = &nodes[b.0].value;
    add_into(adj, nodes, a, |buf| {
        for bi in 0..batch {
            for i in 0..m {
                let grow = &g[bi * m * n + i * n..bi * m * n + (i + 1) * n];
                for p in 0..k {
                    let brow = &vb[bi * k * n + p * n..bi * k * n + (p + 1) * n];
                    let mut acc = T::zero();
                    for (&gv, &bv) in grow.iter().zip(brow) {
                        acc = acc + gv * bv;
                    }
                    let at = bi * m * k + i * k + p;
                    buf[at] = buf[at] + acc;
                }
            }
        }
    });
    add_into(adj, nodes, b, |buf| {
        for bi in 0..batch {
            for i in 0..m {
                let grow = &g[bi * m * n + i * n..bi * m * n + (i + 1) * n];
                for p in 0..k {
                    let av = va[bi * m * k + i * k + p];
                    let out = &mut buf[bi * k * n + p * n..bi * k * n + (p + 1) * n];
                    for (o, &gv) in out.iter_mut().zip(grow) {
                        *o = *o + av * gv;
                    }
                }
            }
        }
    });
}

fn backward_conv<T: Real>(
    adj: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    input: Var,
    kernel: Var,
    stride: usize,
    out_shape: &[usize],
    g: &[T],
) {
    let si = &nodes[input.0].shape;
    let sk = &nodes[kernel.0].shape;
    let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
    let (f, kh, kw) = (sk[0], sk[2], sk[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let geom = ConvGeom { c, h, w, kh, kw, stride, oh, ow };
    let x = &nodes[input.0].value;
    let k = &nodes[kernel.0].value;
    let (rows, cols) = (c * kh * kw, oh * ow);
    let image = c * h * w;
    let mut patches = vec![T::zero(); rows * cols];
    add_into(adj, nodes, input, |buf| {
        for bi in 0..b {
            patches.iter_mut().for_each(|v| *v = T::zero());
            for fi in 0..f {
                let go = &g[(bi * f + fi) * cols..(bi * f + fi + 1) * cols];
                for (r, &kv) in k[fi * rows..(fi + 1) * rows].iter().enumerate() {
                    for (acc, &gv) in patches[r * cols..(r + 1) * cols].iter_mut().zip(go) {
                        *acc = *acc + kv * gv;
                    }
                }
            }
            geom.col2im_add(&patches, &mut buf[bi * image..(bi + 1) * image]);
        }
    });
    add_into(adj, nodes, kernel, |buf| {
        // Patch-major layout so the kernel gradient is a row update too.
        let mut rowwise = vec![T::zero(); rows * cols];
        for bi in 0..b {
            geom.im2col(&x[bi * image..(bi + 1) * image], &mut patches);
            for r in 0..rows {
                for p in 0..cols {
                    rowwise[p * rows + r] = patches[r * cols + p];
                }
            }
            for fi in 0..f {
                let go = &g[(bi * f + fi) * cols..(bi * f + fi + 1) * cols];
                let kg = &mut buf[fi * rows..(fi + 1) * rows];
                for (p, &gv) in go.iter().enumerate() {
                    for (acc, &pv) in kg.iter_mut().zip(&rowwise[p * rows..(p + 1) * rows]) {
                        *acc = *acc + gv * pv;
                    }
                }
            }
        }
    });
}

/// Shape bookkeeping for one image of a valid convolution.
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Unfolds `[c,h,w]` into `[c*kh*kw, oh*ow]`, one row per kernel tap.
    fn im2col<T: Real>(&self, x: &[T], out: &mut [T]) {
        let cols = self.oh * self.ow;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let row = &mut out[r * cols..(r + 1) * cols];
                    for oy in 0..self.oh {
                        let src = (ci * self.h + oy * self.stride + ky) * self.w + kx;
                        for ox in 0..self.ow {
                            row[oy * self.ow + ox] = x[src + ox * self.stride];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters taps back, summing overlaps.
    fn col2im_add<T: Real>(&self, cols_buf: &[T], x: &mut [T]) {
        let cols = self.oh * self.ow;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let row = &cols_buf[r * cols..(r + 1) * cols];
                    for oy in 0..self.oh {
                        let dst = (ci * self.h + oy * self.stride + ky) * self.w + kx;
                        for ox in 0..self.ow {
                            let at = dst + ox * self.stride;
                            x[at] = x[at] + row[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
