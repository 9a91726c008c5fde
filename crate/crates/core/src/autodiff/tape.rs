use std::sync::Arc;

use crate::scalar::{sigmoid, Scalar};

use super::kernels::{self, ConvGeometry};
use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary<T> {
    Exp,
    Sigmoid,
    Relu,
    Sqrt,
    Sin,
    Cos,
    Abs,
    Scale(T),
    /// Zero gradient strictly outside `[lo, hi]`, one inside and on the bounds.
    Clamp(T, T),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Fixed sparse linear map applied independently to each leading slice of its input.
///
/// Used for resampling (bilinear zoom, nearest upsampling) and region pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap<T> {
    pub n_in: usize,
    pub n_out: usize,
    /// `(out, in, weight)` triples.
    pub entries: Vec<(usize, usize, T)>,
}

impl<T: Scalar> SparseMap<T> {
    pub fn apply(&self, input: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.n_out];
        for &(o, i, w) in &self.entries {
            out[o] += w * input[i];
        }
        out
    }
}

enum Op<T> {
    Leaf,
    Unary(Var, Unary<T>),
    Binary(Var, Var, Binary),
    MatMul(Var, Var),
    Transpose(Var),
    AddAlong { x: Var, bias: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Reshape(Var),
    SliceAxis0 { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    Index { x: Var, idx: usize },
    Extremum { x: Var, idx: usize },
    Conv2d { input: Var, kernel: Var, geom: ConvGeometry },
    AvgPool2 { x: Var },
    Sparse { x: Var, map: Arc<SparseMap<T>> },
    Spire { intensity: Var, levels: Var, width: Var, centered: bool },
    CrossEntropy { logits: Var, label: usize },
    StraightThrough { surrogate: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in insertion order, which is a topological order; `backward`
/// walks them strictly in reverse so each node's gradient is complete before it
/// is propagated to its inputs.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    first_nonfinite: Option<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b || nb == 1 {
        Ok(a.to_vec())
    } else if na == 1 {
        Ok(b.to_vec())
    } else {
        Err(TensorError::ShapeMismatch { op: "elementwise", lhs: a.to_vec(), rhs: b.to_vec() })
    }
}

/// `(outer, n, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: &[T]) {
    match slot {
        Some(g) => {
            for (a, &b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), first_nonfinite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(self.nodes.len());
        }
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(v.0))
        }
    }

    /// Hash of every discrete branch taken so far: ReLU/abs signs, clamp zones,
    /// arg-extreme indices, spire supports and straight-through values.
    ///
    /// Two evaluations with equal signatures lie on the same smooth piece of the
    /// recorded function, which is what finite differences need.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let data = |v: Var| self.nodes[v.0].value.data();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Unary(x, Unary::Relu) | Op::Unary(x, Unary::Abs) => {
                    i.hash(&mut h);
                    for &v in data(*x) {
                        (v > T::zero(), v < T::zero()).hash(&mut h);
                    }
                }
                Op::Unary(x, Unary::Clamp(lo, hi)) => {
                    i.hash(&mut h);
                    for &v in data(*x) {
                        (v < *lo, v > *hi).hash(&mut h);
                    }
                }
                Op::Extremum { idx, .. } => (i, *idx).hash(&mut h),
                Op::Spire { intensity, levels, width, .. } => {
                    i.hash(&mut h);
                    let w = data(*width)[0];
                    for &x in data(*intensity) {
                        for &l in data(*levels) {
                            ((l - x).abs() < w, l > x).hash(&mut h);
                        }
                    }
                }
                Op::StraightThrough { .. } => {
                    i.hash(&mut h);
                    for v in node.value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Index of the first node whose value contained NaN or infinity.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.first_nonfinite
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of `x`'s value with no gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of the last `backward` root(s) w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like `v`, zeros if nothing reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad matches value"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise ----------------------------------------------------

    fn unary(&mut self, x: Var, kind: Unary<T>) -> Result<Var, TensorError> {
        self.check(x)?;
        let f: Box<dyn Fn(T) -> T> = match kind {
            Unary::Exp => Box::new(|v: T| v.exp()),
            Unary::Sigmoid => Box::new(sigmoid),
            Unary::Relu => Box::new(|v: T| if v > T::zero() { v } else { T::zero() }),
            Unary::Sqrt => Box::new(|v: T| v.sqrt()),
            Unary::Sin => Box::new(|v: T| v.sin()),
            Unary::Cos => Box::new(|v: T| v.cos()),
            Unary::Abs => Box::new(|v: T| v.abs()),
            Unary::Scale(c) => Box::new(move |v: T| v * c),
            Unary::Clamp(lo, hi) => Box::new(move |v: T| v.max(lo).min(hi)),
        };
        let value = self.nodes[x.0].value.map(f);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Unary(x, kind), rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Unary::Exp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Unary::Relu)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Unary::Sqrt)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Unary::Sin)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Unary::Cos)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Unary::Abs)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        self.unary(x, Unary::Scale(c))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var, TensorError> {
        if !(lo <= hi) {
            return Err(TensorError::InvalidArgument("clamp requires lo <= hi"));
        }
        self.unary(x, Unary::Clamp(lo, hi))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(va.shape(), vb.shape())?;
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let pick = |d: &[T], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let data: Vec<T> = (0..n)
            .map(|i| {
                let (x, y) = (pick(da, i), pick(db, i));
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary(a, b, kind), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Binary::Div)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.mul(a, a)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    // ---- linear algebra -------------------------------------------------

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(TensorError::RankMismatch { op, expected: 2, shape: s.to_vec() }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let (m, n) = self.dims2(a, "transpose")?;
        let data = kernels::transpose(self.value(a).data(), m, n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::Transpose(a), rg))
    }

    /// Adds `bias` (length `shape[axis]`) along `axis`, broadcasting over every other axis.
    pub fn add_along(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var, TensorError> {
        self.check(x)?;
        self.check(bias)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.value(bias).numel() != shape[axis] {
            return Err(TensorError::ShapeMismatch {
                op: "add_along",
                lhs: shape,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut data = xv.to_vec();
        for o in 0..outer {
            for (j, &b) in bv.iter().enumerate() {
                let base = (o * n + j) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += b);
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddAlong { x, bias, axis }, rg))
    }

    /// `x · w + b` for `x[m×k]`, `w[k×n]`, `b[n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_along(y, b, 1)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument("softmax axis out of range"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| xv[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (xv[at(j)] - mx).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    data[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax { x, axis }, rg))
    }

    // ---- reductions and reshaping ---------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    /// Sums out `axis`; a rank-1 input reduces to shape `[1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument("sum_axis axis out of range"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xv[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::SumAxis { x, axis }, rg))
    }

    /// Mean over rows of a 2-D tensor, giving a vector of its column count.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, _) = self.dims2(x, "mean_rows")?;
        let s = self.sum_axis(x, 0)?;
        self.scale(s, T::one() / T::from_usize_lossy(m))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.check(x)?;
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_axis0(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if start >= end || end > shape[0] {
            return Err(TensorError::InvalidArgument("slice range out of bounds"));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * inner..end * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = end - start;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::SliceAxis0 { x, start }, rg))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        self.check(x)?;
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start >= end || end > n {
            return Err(TensorError::InvalidArgument("column range out of bounds"));
        }
        let w = end - start;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&xv[i * n + start..i * n + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, w], data)?, Op::SliceCols { x, start }, rg))
    }

    /// Flattens and concatenates all inputs into one vector.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::InvalidArgument("concat of nothing"));
        }
        let mut data = Vec::new();
        let mut rg = false;
        for &x in xs {
            self.check(x)?;
            data.extend_from_slice(self.value(x).data());
            rg |= self.rg(x);
        }
        Ok(self.push(Tensor::from_vec(data), Op::Concat(xs.to_vec()), rg))
    }

    /// Concatenates equal-shaped inputs and reshapes to `[xs.len(), ..shape]`.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = self.shape(*xs.first().ok_or(TensorError::InvalidArgument("stack of nothing"))?).to_vec();
        for &x in xs {
            if self.shape(x) != first.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: first.clone(),
                    rhs: self.shape(x).to_vec(),
                });
            }
        }
        let flat = self.concat(xs)?;
        let mut shape = vec![xs.len()];
        if first != [1] {
            shape.extend_from_slice(&first);
        }
        self.reshape(flat, &shape)
    }

    /// Side-by-side concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::InvalidArgument("concat_cols of nothing"));
        }
        let mut m = None;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            self.check(x)?;
            let (r, c) = self.dims2(x, "concat_cols")?;
            if *m.get_or_insert(r) != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: self.shape(x).to_vec(),
                });
            }
            widths.push(c);
        }
        let m = m.unwrap_or(0);
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::ConcatCols(xs.to_vec()), rg))
    }

    /// Element `idx` of the flattened tensor, as a scalar.
    pub fn index(&mut self, x: Var, idx: usize) -> Result<Var, TensorError> {
        self.check(x)?;
        let v = *self
            .value(x)
            .data()
            .get(idx)
            .ok_or(TensorError::InvalidArgument("index out of bounds"))?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::Index { x, idx }, rg))
    }

    fn extremum(&mut self, x: Var, want_max: bool) -> Result<Var, TensorError> {
        self.check(x)?;
        let xv = self.value(x).data();
        let mut idx = 0;
        for (i, &v) in xv.iter().enumerate() {
            if (want_max && v > xv[idx]) || (!want_max && v < xv[idx]) {
                idx = i;
            }
        }
        let v = xv[idx];
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::Extremum { x, idx }, rg))
    }

    /// Maximum element; the gradient goes to its first occurrence.
    pub fn max(&mut self, x: Var) -> Result<Var, TensorError> {
        self.extremum(x, true)
    }

    /// Minimum element; the gradient goes to its first occurrence.
    pub fn min(&mut self, x: Var) -> Result<Var, TensorError> {
        self.extremum(x, false)
    }

    // ---- image operators ------------------------------------------------

    /// Cross-correlation of `input[C_in×H×W]` with `kernel[C_out×C_in×k×k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: usize, stride: usize) -> Result<Var, TensorError> {
        self.check(input)?;
        self.check(kernel)?;
        let (c_in, h, w) = match self.shape(input) {
            &[c, h, w] => (c, h, w),
            s => return Err(TensorError::RankMismatch { op: "conv2d", expected: 3, shape: s.to_vec() }),
        };
        let (c_out, kc, k) = match self.shape(kernel) {
            &[co, ci, kh, kw] if kh == kw => (co, ci, kh),
            s => return Err(TensorError::RankMismatch { op: "conv2d", expected: 4, shape: s.to_vec() }),
        };
        if kc != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(input).to_vec(),
                rhs: self.shape(kernel).to_vec(),
            });
        }
        if k % 2 == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d needs an odd kernel and stride >= 1"));
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(TensorError::KernelTooLarge { kernel: k, padded: (h + 2 * pad).min(w + 2 * pad) });
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            k,
            pad,
            stride,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        };
        let data = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let rg = self.rg(input) || self.rg(kernel);
        let value = Tensor::new(vec![c_out, geom.h_out, geom.w_out], data)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, geom }, rg))
    }

    /// 2×2 average pooling with stride 2 over `x[C×H×W]`; H and W must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let (c, h, w) = match self.shape(x) {
            &[c, h, w] if h % 2 == 0 && w % 2 == 0 => (c, h, w),
            s => return Err(TensorError::RankMismatch { op: "avg_pool2", expected: 3, shape: s.to_vec() }),
        };
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::lit(0.25);
        let mut data = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let at = |y: usize, xx: usize| xv[(ch * h + y) * w + xx];
                    data[(ch * ho + i) * wo + j] = (at(2 * i, 2 * j)
                        + at(2 * i, 2 * j + 1)
                        + at(2 * i + 1, 2 * j)
                        + at(2 * i + 1, 2 * j + 1))
                        * quarter;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, ho, wo], data)?, Op::AvgPool2 { x }, rg))
    }

    /// Applies `map` to each of the `numel / map.n_in` leading slices of `x`.
    /// The result has shape `[leading, ..out_tail]` with `product(out_tail) == map.n_out`.
    pub fn sparse_map(&mut self, x: Var, map: Arc<SparseMap<T>>, out_tail: &[usize]) -> Result<Var, TensorError> {
        self.check(x)?;
        let numel = self.value(x).numel();
        if map.n_in == 0 || numel % map.n_in != 0 || out_tail.iter().product::<usize>() != map.n_out {
            return Err(TensorError::InvalidArgument("sparse map does not fit input"));
        }
        let lead = numel / map.n_in;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(lead * map.n_out);
        for l in 0..lead {
            data.extend(map.apply(&xv[l * map.n_in..(l + 1) * map.n_in]));
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(out_tail);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Sparse { x, map }, rg))
    }

    // ---- pipeline-specific fused operators ------------------------------

    /// Spire-shaped soft assignment of every element of `intensity` to each of `levels`.
    ///
    /// Output `[P×M]`: `1 - s·|L_m - I_p|` when `|L_m - I_p| < width`, else 0, where
    /// `s = 1` (verbatim) or `s = 1/width` (centered).
    pub fn spire(&mut self, intensity: Var, levels: Var, width: Var, centered: bool) -> Result<Var, TensorError> {
        self.check(intensity)?;
        self.check(levels)?;
        self.check(width)?;
        if self.value(width).numel() != 1 {
            return Err(TensorError::InvalidArgument("spire width must be a scalar"));
        }
        let iv = self.value(intensity).data();
        let lv = self.value(levels).data();
        let w = self.value(width).item();
        let slope = if centered { T::one() / w } else { T::one() };
        let (p, m) = (iv.len(), lv.len());
        let mut data = vec![T::zero(); p * m];
        for (i, &x) in iv.iter().enumerate() {
            for (j, &l) in lv.iter().enumerate() {
                let d = (l - x).abs();
                if d < w {
                    data[i * m + j] = T::one() - d * slope;
                }
            }
        }
        let rg = self.rg(intensity) || self.rg(levels) || (centered && self.rg(width));
        let value = Tensor::new(vec![p, m], data)?;
        Ok(self.push(value, Op::Spire { intensity, levels, width, centered }, rg))
    }

    /// `logsumexp(logits) - logits[label]`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, TensorError> {
        self.check(logits)?;
        let lv = self.value(logits).data();
        if label >= lv.len() {
            return Err(TensorError::BadLabel { label, classes: lv.len() });
        }
        let mx = lv.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = mx + lv.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        let ce = lse - lv[label];
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(ce), Op::CrossEntropy { logits, label }, rg))
    }

    /// Forward value `hard`; backward passes the incoming gradient to `surrogate` unchanged.
    pub fn straight_through(&mut self, surrogate: Var, hard: Tensor<T>) -> Result<Var, TensorError> {
        self.check(surrogate)?;
        if hard.shape() != self.shape(surrogate) {
            return Err(TensorError::ShapeMismatch {
                op: "straight_through",
                lhs: self.shape(surrogate).to_vec(),
                rhs: hard.shape().to_vec(),
            });
        }
        let rg = self.rg(surrogate);
        let mut hard = hard;
        hard.set_requires_grad(false);
        Ok(self.push(hard, Op::StraightThrough { surrogate }, rg))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `d root / d node` into every node's gradient slot.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        self.check(root)?;
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        let mut pass: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        pass[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut pass);
            accumulate(&mut self.grads[i], &g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], pass: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, contrib: &[T]| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut pass[v.0], contrib);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, kind) => {
                let xv = val(*x);
                let dx: Vec<T> = match *kind {
                    Unary::Exp => g.iter().zip(out).map(|(&g, &y)| g * y).collect(),
                    Unary::Sigmoid => g.iter().zip(out).map(|(&g, &y)| g * y * (T::one() - y)).collect(),
                    Unary::Relu => g
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                    Unary::Sqrt => g.iter().zip(out).map(|(&g, &y)| g / (y + y)).collect(),
                    Unary::Sin => g.iter().zip(xv).map(|(&g, &x)| g * x.cos()).collect(),
                    Unary::Cos => g.iter().zip(xv).map(|(&g, &x)| -g * x.sin()).collect(),
                    Unary::Abs => g
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                    Unary::Scale(c) => g.iter().map(|&g| g * c).collect(),
                    Unary::Clamp(lo, hi) => g
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| if x < lo || x > hi { T::zero() } else { g })
                        .collect(),
                };
                send(*x, &dx);
            }
            Op::Binary(a, b, kind) => {
                let (av, bv) = (val(*a), val(*b));
                let pick = |d: &[T], k: usize| if d.len() == 1 { d[0] } else { d[k] };
                let reduce = |full: Vec<T>, len: usize| -> Vec<T> {
                    if len == 1 && full.len() != 1 {
                        vec![full.iter().copied().sum()]
                    } else {
                        full
                    }
                };
                let n = g.len();
                let (da, db): (Vec<T>, Vec<T>) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
                    Binary::Mul => (
                        (0..n).map(|k| g[k] * pick(bv, k)).collect(),
                        (0..n).map(|k| g[k] * pick(av, k)).collect(),
                    ),
                    Binary::Div => (
                        (0..n).map(|k| g[k] / pick(bv, k)).collect(),
                        (0..n)
                            .map(|k| {
                                let y = pick(bv, k);
                                -g[k] * pick(av, k) / (y * y)
                            })
                            .collect(),
                    ),
                };
                send(*a, &reduce(da, av.len()));
                send(*b, &reduce(db, bv.len()));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    send(*a, &kernels::matmul_nt(g, val(*b), m, n, k));
                }
                if self.rg(*b) {
                    send(*b, &kernels::matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                send(*a, &kernels::transpose(g, n, m));
            }
            Op::AddAlong { x, bias, axis } => {
                send(*x, g);
                if self.rg(*bias) {
                    let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                    let mut db = vec![T::zero(); n];
                    for o in 0..outer {
                        for (j, d) in db.iter_mut().enumerate() {
                            let base = (o * n + j) * inner;
                            *d += g[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                    send(*bias, &db);
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(*x, &dx);
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                send(*x, &vec![g[0]; n]);
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let dst = &mut dx[(o * n + j) * inner..(o * n + j + 1) * inner];
                        dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                send(*x, &dx);
            }
            Op::Reshape(x) => send(*x, g),
            Op::SliceAxis0 { x, start } => {
                let shape = self.shape(*x);
                let inner: usize = shape[1..].iter().product();
                let mut dx = vec![T::zero(); val(*x).len()];
                dx[start * inner..start * inner + g.len()].copy_from_slice(g);
                send(*x, &dx);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = g.len() / m;
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                send(*x, &dx);
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = val(x).len();
                    send(x, &g[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatCols(xs) => {
                let m = node.value.shape()[0];
                let n = node.value.shape()[1];
                let mut off = 0;
                for &x in xs {
                    let w = self.shape(x)[1];
                    let mut dx = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dx.extend_from_slice(&g[r * n + off..r * n + off + w]);
                    }
                    send(x, &dx);
                    off += w;
                }
            }
            Op::Index { x, idx } | Op::Extremum { x, idx } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                dx[*idx] = g[0];
                send(*x, &dx);
            }
            Op::Conv2d { input, kernel, geom } => {
                if self.rg(*kernel) {
                    send(*kernel, &kernels::conv2d_grad_kernel(geom, val(*input), g));
                }
                if self.rg(*input) {
                    send(*input, &kernels::conv2d_grad_input(geom, val(*kernel), g));
                }
            }
            Op::AvgPool2 { x } => {
                let (c, h, w) = {
                    let s = self.shape(*x);
                    (s[0], s[1], s[2])
                };
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::lit(0.25);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[(ch * h + y) * w + xx] = g[(ch * ho + y / 2) * wo + xx / 2] * quarter;
                        }
                    }
                }
                send(*x, &dx);
            }
            Op::Sparse { x, map } => {
                let lead = g.len() / map.n_out;
                let mut dx = vec![T::zero(); lead * map.n_in];
                for l in 0..lead {
                    let go = &g[l * map.n_out..(l + 1) * map.n_out];
                    let di = &mut dx[l * map.n_in..(l + 1) * map.n_in];
                    for &(o, i, w) in &map.entries {
                        di[i] += w * go[o];
                    }
                }
                send(*x, &dx);
            }
            Op::Spire { intensity, levels, width, centered } => {
                let iv = val(*intensity);
                let lv = val(*levels);
                let w = val(*width)[0];
                let slope = if *centered { T::one() / w } else { T::one() };
                let m = lv.len();
                let mut di = vec![T::zero(); iv.len()];
                let mut dl = vec![T::zero(); m];
                let mut dw = T::zero();
                for (p, &x) in iv.iter().enumerate() {
                    for (j, &l) in lv.iter().enumerate() {
                        let diff = l - x;
                        let d = diff.abs();
                        if d >= w {
                            continue;
                        }
                        let gv = g[p * m + j];
                        let sign = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        // V = 1 - slope*|L - I|
                        di[p] += gv * slope * sign;
                        dl[j] -= gv * slope * sign;
                        if *centered {
                            dw += gv * d / (w * w);
                        }
                    }
                }
                send(*intensity, &di);
                send(*levels, &dl);
                if *centered {
                    send(*width, &[dw]);
                }
            }
            Op::CrossEntropy { logits, label } => {
                let lv = val(*logits);
                let mx = lv.iter().copied().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = lv.iter().map(|&v| (v - mx).exp()).collect();
                let total: T = exps.iter().copied().sum();
                let dx: Vec<T> = exps
                    .iter()
                    .enumerate()
                    .map(|(k, &e)| {
                        let p = e / total;
                        g[0] * if k == *label { p - T::one() } else { p }
                    })
                    .collect();
                send(*logits, &dx);
            }
            Op::StraightThrough { surrogate } => send(*surrogate, g),
        }
    }
}
