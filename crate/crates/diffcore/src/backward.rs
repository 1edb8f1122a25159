use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::{gemm_acc, split_axis, Graph, Op, Var};

/// Gradients of a scalar loss with respect to every node that required
/// one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.id()).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of its shape if no gradient reached it.
    pub fn wrt(&self, v: Var) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(&self.shapes[v.id()]))
    }

    pub fn take(&mut self, v: Var) -> Array {
        self.grads[v.id()]
            .take()
            .unwrap_or_else(|| Array::zeros(&self.shapes[v.id()]))
    }
}

fn accumulate(slot: &mut Option<Array>, g: Array) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape().to_vec(), data).expect("same shape")
}

fn zip3_map(a: &Array, b: &Array, c: &Array, f: impl Fn(f64, f64, f64) -> f64) -> Array {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Array::new(a.shape().to_vec(), data).expect("same shape")
}

impl Graph {
    /// Reverse sweep from a one-element `loss`. Nodes are visited in
    /// decreasing id order and each node's contributions to its parents
    /// are emitted in a fixed order, so results are bit-reproducible.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        let loss_value = &self.nodes[loss.id()].value;
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.id()].requires_grad {
            grads[loss.id()] = Some(Array::full(loss_value.shape(), 1.0));
        }
        for id in (0..=loss.id()).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (parent, contribution) in self.local_grads(id, &g) {
                if self.nodes[parent.id()].requires_grad {
                    accumulate(&mut grads[parent.id()], contribution);
                }
            }
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Vector-Jacobian products for node `id` given its output gradient.
    fn local_grads(&self, id: usize, g: &Array) -> Vec<(Var, Array)> {
        let node = &self.nodes[id];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.id()].value;
        let wants = |v: Var| self.nodes[v.id()].requires_grad;
        match &node.op {
            Op::Leaf | Op::StopGrad => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                if wants(*a) {
                    out.push((*a, zip_map(g, val(*b), |g, b| g * b)));
                }
                if wants(*b) {
                    out.push((*b, zip_map(g, val(*a), |g, a| g * a)));
                }
                out
            }
            Op::Div(a, b) => {
                let mut out = Vec::new();
                if wants(*a) {
                    out.push((*a, zip_map(g, val(*b), |g, b| g / b)));
                }
                if wants(*b) {
                    out.push((*b, zip3_map(g, val(*a), val(*b), |g, a, b| -g * a / (b * b))));
                }
                out
            }
            Op::Neg(x) => vec![(*x, g.map(|v| -v))],
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
            Op::Offset(x) => vec![(*x, g.clone())],
            Op::MatMul(a, b) => self.matmul_grads(*a, *b, g),
            Op::Rearrange(x, map) => {
                let mut gx = Array::zeros(val(*x).shape());
                let dst = gx.data_mut();
                for (&src, &gv) in map.iter().zip(g.data()) {
                    dst[src] += gv;
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(val(*x).shape()).expect("reshape grad");
                vec![(*x, gx)]
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = split_axis(y.shape(), *axis);
                let total = y.shape()[*axis] * inner;
                let mut start = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let chunk = val(x).shape()[*axis] * inner;
                    if wants(x) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + start;
                            data.extend_from_slice(&g.data()[base..base + chunk]);
                        }
                        out.push((x, Array::new(val(x).shape().to_vec(), data).expect("concat grad")));
                    }
                    start += chunk;
                }
                out
            }
            Op::Slice { x, axis, start } => {
                let shape = val(*x).shape();
                let (outer, dim, inner) = split_axis(shape, *axis);
                let len = y.shape()[*axis];
                let mut gx = Array::zeros(shape);
                let dst = gx.data_mut();
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    dst[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Gather(table, indices) => {
                let shape = val(*table).shape();
                let width = shape[1];
                let mut gt = Array::zeros(shape);
                let dst = gt.data_mut();
                for (r, &i) in indices.iter().enumerate() {
                    for (d, s) in dst[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g.data()[r * width..(r + 1) * width])
                    {
                        *d += s;
                    }
                }
                vec![(*table, gt)]
            }
            Op::SumAxis(x, axis) => {
                let shape = val(*x).shape();
                let (outer, dim, inner) = split_axis(shape, *axis);
                let mut gx = Array::zeros(shape);
                let dst = gx.data_mut();
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for d in 0..dim {
                        dst[(o * dim + d) * inner..(o * dim + d + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![(*x, gx)]
            }
            Op::SumAll(x) => vec![(*x, Array::full(val(*x).shape(), g.item()))],
            Op::Exp(x) => vec![(*x, zip_map(g, y, |g, y| g * y))],
            Op::Log(x) => vec![(*x, zip_map(g, val(*x), |g, x| g / x))],
            Op::Sqrt(x) => vec![(*x, zip_map(g, y, |g, y| g / (2.0 * y)))],
            Op::Square(x) => vec![(*x, zip_map(g, val(*x), |g, x| 2.0 * g * x))],
            Op::AbsSmooth(x) => vec![(*x, zip3_map(g, val(*x), y, |g, x, y| g * x / y))],
            Op::Relu(x) => vec![(*x, zip_map(g, val(*x), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Sin(x) => vec![(*x, zip_map(g, val(*x), |g, x| g * x.cos()))],
            Op::Cos(x) => vec![(*x, zip_map(g, val(*x), |g, x| -g * x.sin()))],
            Op::MinConst(x, c) => {
                let c = *c;
                vec![(*x, zip_map(g, val(*x), |g, x| if x < c { g } else { 0.0 }))]
            }
            Op::StraightThrough(x) => vec![(*x, g.clone())],
            Op::Softmax(x) => {
                let d = *y.shape().last().expect("softmax rank");
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm(x, eps) => {
                let xv = val(*x);
                let d = *y.shape().last().expect("layer_norm rank");
                let nf = d as f64;
                let mut gx = g.clone();
                for ((grow, yrow), xrow) in gx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(xv.data().chunks(d))
                {
                    let mean = xrow.iter().sum::<f64>() / nf;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = grow.iter().sum::<f64>() / nf;
                    let gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = inv * (*gv - gmean - yv * gy);
                    }
                }
                vec![(*x, gx)]
            }
            Op::NormLast(x) => {
                let xv = val(*x);
                let d = *xv.shape().last().expect("norm rank");
                let mut gx = xv.clone();
                for ((row, &gy), &ny) in gx.data_mut().chunks_mut(d).zip(g.data()).zip(y.data()) {
                    for v in row.iter_mut() {
                        *v *= gy / ny;
                    }
                }
                vec![(*x, gx)]
            }
            Op::CumSum(x, axis) => {
                let (outer, dim, inner) = split_axis(y.shape(), *axis);
                let mut gx = g.clone();
                let data = gx.data_mut();
                for o in 0..outer {
                    for d in (0..dim.saturating_sub(1)).rev() {
                        for i in 0..inner {
                            let next = data[(o * dim + d + 1) * inner + i];
                            data[(o * dim + d) * inner + i] += next;
                        }
                    }
                }
                vec![(*x, gx)]
            }
        }
    }

    fn matmul_grads(&self, a: Var, b: Var, g: &Array) -> Vec<(Var, Array)> {
        let (va, vb) = (&self.nodes[a.id()].value, &self.nodes[b.id()].value);
        let sa = va.shape();
        let sb = vb.shape();
        let (batch, m, k, n) = if sa.len() == 2 {
            (1, sa[0], sa[1], sb[1])
        } else {
            (sa[0], sa[1], sa[2], sb[2])
        };
        let mut out = Vec::new();
        if self.nodes[a.id()].requires_grad {
            // dA = dC * B^T
            let mut ga = Array::zeros(sa);
            for bi in 0..batch {
                gemm_acc(
                    m,
                    n,
                    k,
                    &g.data()[bi * m * n..],
                    (n, 1),
                    &vb.data()[bi * k * n..],
                    (1, n),
                    &mut ga.data_mut()[bi * m * k..],
                    0.0,
                );
            }
            out.push((a, ga));
        }
        if self.nodes[b.id()].requires_grad {
            // dB = A^T * dC
            let mut gb = Array::zeros(sb);
            for bi in 0..batch {
                gemm_acc(
                    k,
                    m,
                    n,
                    &va.data()[bi * m * k..],
                    (1, k),
                    &g.data()[bi * m * n..],
                    (n, 1),
                    &mut gb.data_mut()[bi * k * n..],
                    0.0,
                );
            }
            out.push((b, gb));
        }
        out
    }
}

/// Maximum over coordinates of `|analytic - numeric| / max(1, |analytic|)`
/// where the numeric gradient is a central difference with step `h`.
///
/// `f` builds a scalar from the input node; it is re-run on a fresh graph
/// for every perturbation.
pub fn gradcheck<F>(f: F, x: &Array, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    assert!(h > 0.0, "gradcheck step must be positive");
    let eval = |point: Array| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point);
        let out = f(&mut g, v)?;
        let value = g.value(out);
        if value.len() != 1 {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        Ok(value.item())
    };
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    let analytic = g.backward(loss)?.wrt(xv);
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative_at_three() {
        let mut g = Graph::new();
        let x = g.param(Array::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 6.0);
    }

    #[test]
    fn linear_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(Array::from_vec(vec![1.0, -2.0, 0.5]));
        let y = g.scale(x, 2.0).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn constant_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Array::from_vec(vec![1.0, 2.0]));
        let c = g.constant(Array::from_vec(vec![3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(c).data(), &[0.0, 0.0]);
        assert_eq!(grads.wrt(x).data(), &[3.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Array::from_vec(vec![1.0, 2.0]));
        assert_eq!(g.backward(x).unwrap_err(), Error::NonScalarLoss(vec![2]));
    }

    #[test]
    fn stop_gradient_blocks() {
        let mut g = Graph::new();
        let x = g.param(Array::from_vec(vec![1.0, 2.0]));
        let s = g.stop_gradient(x).unwrap();
        let y = g.square(s).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + 3x, dy/dx = 2x + 3
        let mut g = Graph::new();
        let x = g.param(Array::scalar(2.0));
        let a = g.mul(x, x).unwrap();
        let b = g.scale(x, 3.0).unwrap();
        let y = g.add(a, b).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).item(), 7.0);
    }

    #[test]
    fn gradcheck_sum_of_squares() {
        let x = Array::from_vec(vec![0.3, -1.2, 2.5, 0.0]);
        let err = gradcheck(
            |g, v| {
                let s = g.square(v)?;
                g.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn gradcheck_rejects_non_finite() {
        let x = Array::from_vec(vec![-1.0]);
        let r = gradcheck(
            |g, v| {
                let l = g.log(v)?;
                g.sum(l)
            },
            &x,
            1e-5,
        );
        assert!(r.is_err());
    }
}
