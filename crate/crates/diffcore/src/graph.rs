use crate::array::{numel, Array};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
///
/// Ids are assigned in creation order, which is also a valid topological
/// order since a node can only reference nodes that already exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    /// Gather-style rearrangement: `out[i] = in[map[i]]`. Covers permute
    /// and broadcast (expand).
    Rearrange(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather(Var, Vec<usize>),
    SumAxis(Var, usize),
    SumAll(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    AbsSmooth(Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Softmax(Var),
    LayerNorm(Var, f64),
    NormLast(Var),
    CumSum(Var, usize),
    MinConst(Var, f64),
    StopGrad,
    StraightThrough(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | StopGrad => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Concat(xs, _) => xs.clone(),
            Neg(x)
            | Scale(x, _)
            | Offset(x)
            | Rearrange(x, _)
            | Reshape(x)
            | Gather(x, _)
            | SumAxis(x, _)
            | SumAll(x)
            | Exp(x)
            | Log(x)
            | Sqrt(x)
            | Square(x)
            | AbsSmooth(x)
            | Relu(x)
            | Sin(x)
            | Cos(x)
            | Softmax(x)
            | LayerNorm(x, _)
            | NormLast(x)
            | CumSum(x, _)
            | MinConst(x, _)
            | StraightThrough(x) => vec![*x],
            Slice { x, .. } => vec![*x],
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            Neg(..) => "neg",
            Scale(..) => "scale",
            Offset(..) => "offset",
            MatMul(..) => "matmul",
            Rearrange(..) => "rearrange",
            Reshape(..) => "reshape",
            Concat(..) => "concat",
            Slice { .. } => "slice",
            Gather(..) => "gather",
            SumAxis(..) => "sum_axis",
            SumAll(..) => "sum",
            Exp(..) => "exp",
            Log(..) => "log",
            Sqrt(..) => "sqrt",
            Square(..) => "square",
            AbsSmooth(..) => "abs_smooth",
            Relu(..) => "relu",
            Sin(..) => "sin",
            Cos(..) => "cos",
            Softmax(..) => "softmax",
            LayerNorm(..) => "layer_norm",
            NormLast(..) => "norm",
            CumSum(..) => "cumsum",
            MinConst(..) => "min_const",
            StopGrad => "stop_gradient",
            StraightThrough(..) => "straight_through",
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Array,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Smoothing constant used by [`Graph::abs_smooth`] and [`Graph::norm`].
pub const SMOOTH_EPS: f64 = 1e-12;

/// A computation graph recorded eagerly: every op computes its value when
/// it is added. Call [`Graph::backward`] on a scalar node to get gradients.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Array) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(va.shape().to_vec(), data).expect("shapes checked")
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(op, value)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.zip_with(a, b, |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// Adds a constant.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Offset(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// `sqrt(x^2 + eps)`, a differentiable stand-in for `|x|`.
    pub fn abs_smooth(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::AbsSmooth(x), |v| (v * v + SMOOTH_EPS).sqrt())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sin(x), f64::sin)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Cos(x), f64::cos)
    }

    /// `min(x, c)` elementwise; gradient is zero wherever `x >= c`.
    pub fn min_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::MinConst(x, c), |v| v.min(c))
    }

    /// Same value as `x`, but backward stops here.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(Op::StopGrad, value)
    }

    /// Node whose forward value is `forward` while its gradient flows
    /// unchanged into `surrogate` (the straight-through estimator).
    pub fn straight_through(&mut self, forward: Array, surrogate: Var) -> Result<Var> {
        if forward.shape() != self.shape(surrogate) {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                lhs: forward.shape().to_vec(),
                rhs: self.shape(surrogate).to_vec(),
            });
        }
        self.push(Op::StraightThrough(surrogate), forward)
    }

    // ---- linear algebra ----------------------------------------------

    /// `[m,k] x [k,n]` or batched `[b,m,k] x [b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n),
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &va[bi * m * k..],
                (k, 1),
                &vb[bi * k * n..],
                (n, 1),
                &mut out[bi * m * n..],
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Array::new(shape, out)?;
        self.push(Op::MatMul(a, b), value)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: self.shape(x).to_vec(),
                reason: "rank must be at least 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidShape {
                op: "permute",
                shape,
                reason: format!("bad permutation {perm:?}"),
            });
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let map = index_map(&out_shape, &src_strides);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let value = Array::new(out_shape, data)?;
        self.push(Op::Rearrange(x, map), value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape(x), value)
    }

    /// Explicit broadcast to `shape` using right-aligned numpy rules.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let err = || Error::ShapeMismatch {
            op: "expand",
            lhs: in_shape.clone(),
            rhs: shape.to_vec(),
        };
        if in_shape.len() > shape.len() {
            return Err(err());
        }
        let lead = shape.len() - in_shape.len();
        let in_strides = strides(&in_shape);
        let mut src_strides = vec![0; shape.len()];
        for (i, &d) in in_shape.iter().enumerate() {
            if d == shape[lead + i] {
                src_strides[lead + i] = in_strides[i];
            } else if d != 1 {
                return Err(err());
            }
        }
        let map = index_map(shape, &src_strides);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let value = Array::new(shape.to_vec(), data)?;
        self.push(Op::Rearrange(x, map), value)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        check_axis("concat", &first, axis)?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Array::new(shape, data)?;
        self.push(Op::Concat(xs.to_vec(), axis), value)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", &shape, axis)?;
        if start + len > shape[axis] {
            return Err(Error::IndexOutOfRange {
                op: "slice",
                index: start + len,
                bound: shape[axis],
            });
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Array::new(out_shape, data)?;
        self.push(Op::Slice { x, axis, start }, value)
    }

    /// Rows of a rank-2 table: `[n, d] -> [indices.len(), d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "gather",
                shape,
                reason: "table must be rank 2".into(),
            });
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                op: "gather",
                index: bad,
                bound: rows,
            });
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let value = Array::new(vec![indices.len(), width], data)?;
        self.push(Op::Gather(table, indices.to_vec()), value)
    }

    // ---- reductions --------------------------------------------------

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("sum_axis", &shape, axis)?;
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Array::new(out_shape, data)?;
        self.push(Op::SumAxis(x, axis), value)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("mean_axis", &shape, axis)?;
        let n = shape[axis] as f64;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum of all entries, as a rank-0 array.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Array::scalar(self.value(x).sum());
        self.push(Op::SumAll(x), value)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    // ---- last-axis ops -----------------------------------------------

    fn last_dim(&self, op: &'static str, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(Error::InvalidShape {
                op,
                shape: self.shape(x).to_vec(),
                reason: "needs a non-empty last axis".into(),
            }),
        }
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim("softmax", x)?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(Op::Softmax(x), value)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let d = self.last_dim("layer_norm", x)?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push(Op::LayerNorm(x, eps), value)
    }

    /// Euclidean norm over the last axis, smoothed as `sqrt(|x|^2 + eps)`.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim("norm", x)?;
        let v = self.value(x);
        let data = v
            .data()
            .chunks(d)
            .map(|row| (row.iter().map(|a| a * a).sum::<f64>() + SMOOTH_EPS).sqrt())
            .collect();
        let mut shape = v.shape().to_vec();
        shape.pop();
        let value = Array::new(shape, data)?;
        self.push(Op::NormLast(x), value)
    }

    /// Inclusive running sum along `axis`.
    pub fn cumsum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("cumsum", &shape, axis)?;
        let (outer, dim, inner) = split_axis(&shape, axis);
        let mut value = self.value(x).clone();
        let data = value.data_mut();
        for o in 0..outer {
            for d in 1..dim {
                for i in 0..inner {
                    let prev = data[(o * dim + d - 1) * inner + i];
                    data[(o * dim + d) * inner + i] += prev;
                }
            }
        }
        self.push(Op::CumSum(x, axis), value)
    }
}

/// For each flat output index, the flat source index given per-axis
/// source strides (zero stride = broadcast).
fn index_map(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// `c = a * b` with `c` row-major `[m, n]`, overwriting `c`.
/// Strides are `(row, col)` pairs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    gemm_acc(m, k, n, a, (rsa, csa), b, (rsb, csb), c, 0.0);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + k.saturating_sub(1) * csa + usize::from(k > 0));
    assert!(b.len() >= k.saturating_sub(1) * rsb + (n - 1) * csb + usize::from(k > 0));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
