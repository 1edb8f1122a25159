//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records operations eagerly; each op computes its value
//! immediately and returns a [`Var`] handle. Leaves are created with
//! [`Graph::param`] (receives gradient) or [`Graph::constant`] (does not).
//! [`Graph::backward`] runs the reverse sweep from a scalar node.
//!
//! ```
//! use diffcore::{Array, Graph};
//!
//! let mut g = Graph::new();
//! let x = g.param(Array::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```
//!
//! There is no implicit broadcasting: binary elementwise ops require equal
//! shapes, and [`Graph::expand`] is the only way to broadcast.

mod array;
mod backward;
mod error;
mod graph;

pub use array::Array;
pub use backward::{gradcheck, Gradients};
pub use error::{Error, Result};
pub use graph::{Graph, Var, SMOOTH_EPS};

/// Names of the differentiable primitives exposed by [`Graph`].
pub fn primitive_set() -> &'static [&'static str] {
    &[
        "add",
        "sub",
        "mul",
        "div",
        "neg",
        "scale",
        "offset",
        "matmul",
        "transpose",
        "permute",
        "reshape",
        "expand",
        "concat",
        "slice",
        "gather",
        "sum_axis",
        "mean_axis",
        "sum",
        "mean",
        "exp",
        "log",
        "sqrt",
        "square",
        "abs_smooth",
        "relu",
        "softmax",
        "layer_norm",
        "norm",
        "cumsum",
        "sin",
        "cos",
        "min_const",
        "stop_gradient",
        "straight_through",
    ]
}
