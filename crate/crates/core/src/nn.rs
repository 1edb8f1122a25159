//! Layers, parameter trees, and the optimizer.
//!
//! Weight structs are generic over their leaf type: `Linear<Array>` holds
//! stored weights and `Linear<Var>` the same weights bound into a graph.
//! [`Tree::map`] converts between the two; [`Tree::visit`] walks leaves in
//! a fixed order that checkpoints and the optimizer rely on.

use diffcore::{Array, Gradients, Graph, Var};
use rand::Rng as _;

use crate::error::Result;
use crate::rng::Rng;

pub trait Tree<T> {
    type Out<U>;
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Out<U>;
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements [`Tree`] for a struct generic over `T` whose fields are
/// leaves (`T`), subtrees, or `Vec`s of subtrees.
macro_rules! param_tree {
    ($name:ident { leaves: [$($leaf:ident),*], subs: [$($sub:ident),*], vecs: [$($vec:ident),*] }) => {
        impl<T> $crate::nn::Tree<T> for $name<T> {
            type Out<U> = $name<U>;
            #[allow(unused_variables)]
            fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> $name<U> {
                $name {
                    $($leaf: f(&self.$leaf),)*
                    $($sub: self.$sub.map(f),)*
                    $($vec: self.$vec.iter().map(|x| x.map(f)).collect(),)*
                }
            }
            #[allow(unused_variables)]
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
                $(f(&$crate::nn::join(prefix, stringify!($leaf)), &self.$leaf);)*
                $(self.$sub.visit(&$crate::nn::join(prefix, stringify!($sub)), f);)*
                $(for (i, x) in self.$vec.iter().enumerate() {
                    x.visit(&$crate::nn::join(prefix, &format!("{}.{}", stringify!($vec), i)), f);
                })*
            }
            #[allow(unused_variables)]
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $(f(&$crate::nn::join(prefix, stringify!($leaf)), &mut self.$leaf);)*
                $(self.$sub.visit_mut(&$crate::nn::join(prefix, stringify!($sub)), f);)*
                $(for (i, x) in self.$vec.iter_mut().enumerate() {
                    x.visit_mut(&$crate::nn::join(prefix, &format!("{}.{}", stringify!($vec), i)), f);
                })*
            }
        }
    };
}
#[allow(unused_imports)]
pub(crate) use param_tree;

/// Binds every leaf as a trainable graph parameter.
pub fn bind_params<W: Tree<Array>>(g: &mut Graph, w: &W) -> W::Out<Var> {
    w.map(&mut |a: &Array| g.param(a.clone()))
}

/// Binds every leaf as a constant (frozen weights).
pub fn bind_constants<W: Tree<Array>>(g: &mut Graph, w: &W) -> W::Out<Var> {
    w.map(&mut |a: &Array| g.constant(a.clone()))
}

/// Gradients for each bound leaf in visit order.
pub fn collect_grads<B: Tree<Var>>(grads: &Gradients, bound: &B) -> Vec<Array> {
    let mut out = Vec::new();
    bound.visit("", &mut |_, v| out.push(grads.wrt(*v)));
    out
}

pub fn named_arrays<W: Tree<Array>>(w: &W, prefix: &str) -> Vec<(String, Array)> {
    let mut out = Vec::new();
    w.visit(prefix, &mut |n, a| out.push((n.to_string(), a.clone())));
    out
}

pub fn param_count<W: Tree<Array>>(w: &W) -> usize {
    let mut n = 0;
    w.visit("", &mut |_, a| n += a.len());
    n
}

pub(crate) fn uniform_array(rng: &mut Rng, shape: &[usize], bound: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape matches")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}
param_tree!(Linear {
    leaves: [weight, bias],
    subs: [],
    vecs: []
});

impl Linear<Array> {
    pub fn init(rng: &mut Rng, input: usize, output: usize) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: uniform_array(rng, &[input, output], bound),
            bias: Array::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array::zeros(&[input, output]),
            bias: Array::zeros(&[output]),
        }
    }
}

impl Linear<Var> {
    /// Applies the layer over the last axis of `x` (any rank >= 1).
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let input = *shape.last().expect("rank >= 1");
        let output = g.shape(self.weight)[1];
        let rows = shape.iter().rev().skip(1).product::<usize>();
        let flat = g.reshape(x, &[rows, input])?;
        let y = g.matmul(flat, self.weight)?;
        let b = g.expand(self.bias, &[rows, output])?;
        let y = g.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = output;
        Ok(g.reshape(y, &out_shape)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: T,
    pub bias: T,
}
param_tree!(LayerNorm {
    leaves: [gain, bias],
    subs: [],
    vecs: []
});

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm<Array> {
    pub fn init(dim: usize) -> Self {
        Self {
            gain: Array::full(&[dim], 1.0),
            bias: Array::zeros(&[dim]),
        }
    }
}

impl LayerNorm<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let y = g.layer_norm(x, LN_EPS)?;
        let gain = g.expand(self.gain, &shape)?;
        let bias = g.expand(self.bias, &shape)?;
        let y = g.mul(y, gain)?;
        Ok(g.add(y, bias)?)
    }
}

/// AdamW with global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl AdamW {
    pub fn new(weight_decay: f64, clip_norm: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay,
            clip_norm,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates the leaves of `w` in visit order with `grads`.
    pub fn update<W: Tree<Array>>(&mut self, w: &mut W, grads: &[Array], lr: f64) {
        if self.m.is_empty() {
            self.m = grads.iter().map(Array::zeros_like).collect();
            self.v = grads.iter().map(Array::zeros_like).collect();
        }
        self.step += 1;
        let norm = grads
            .iter()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        w.visit_mut("", &mut |_, p| {
            let g = &grads[i];
            let m = ms[i].data_mut();
            let v = vs[i].data_mut();
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k] * clip;
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *x -= lr * (mh / (vh.sqrt() + eps) + wd * *x);
            }
            i += 1;
        });
        assert_eq!(i, grads.len(), "gradient count does not match parameters");
    }
}

/// Linear warm-up to `peak` over `warmup` steps, then constant.
pub fn warmup_lr(peak: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 {
        peak
    } else {
        peak * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// Linear warm-up, then cosine decay to 10% of `peak` at `total` steps.
pub fn warmup_cosine_lr(peak: f64, warmup: usize, step: usize, total: usize) -> f64 {
    if step < warmup {
        return warmup_lr(peak, warmup, step);
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let p = ((step - warmup) as f64 / span).min(1.0);
    peak * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * p).cos()))
}
