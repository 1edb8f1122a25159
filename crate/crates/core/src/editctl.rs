//! Differentiable sampling, the consistency loss, inference-time editing
//! of logits and codebook embeddings, and the obstacle loss.

use std::path::Path;

use diffcore::{Array, Graph, Var};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::kinematics::SpatialControl;
use crate::rng::Rng;
use crate::tokenizer::Codebook;

/// `-log(-log(u))`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// I.i.d. Gumbel(0, 1) noise of the given shape.
pub fn gumbel_noise(shape: &[usize], rng: &mut Rng) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Open interval: reject the (measure-zero) endpoint 0.
            let mut u: f64 = rng.gen();
            while u <= 0.0 {
                u = rng.gen();
            }
            gumbel_from_uniform(u)
        })
        .collect();
    Array::new(shape.to_vec(), data).expect("shape matches")
}

/// Row-wise `softmax((l + g) / tau)`; `noise = None` means `g = 0`.
pub fn gumbel_softmax(g: &mut Graph, logits: Var, noise: Option<&Array>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature {tau} must be positive")));
    }
    let x = match noise {
        Some(n) => {
            if n.shape() != g.shape(logits) {
                return Err(Error::Layout(format!(
                    "noise {:?} does not match logits {:?}",
                    n.shape(),
                    g.shape(logits)
                )));
            }
            let nv = g.constant(n.clone());
            g.add(logits, nv)?
        }
        None => logits,
    };
    let x = g.scale(x, 1.0 / tau)?;
    Ok(g.softmax(x)?)
}

/// Value-only [`gumbel_softmax`] over a rank-2 array.
pub fn gumbel_softmax_array(logits: &Array, noise: Option<&Array>, tau: f64) -> Result<Array> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let p = gumbel_softmax(&mut g, l, noise, tau)?;
    Ok(g.value(p).clone())
}

/// Row-wise argmax (ties to the lowest index).
pub fn hard_indices(probs: &Array) -> Vec<usize> {
    let k = *probs.shape().last().expect("rank >= 1");
    probs.data().chunks(k).map(crate::maskmodel::argmax).collect()
}

/// Straight-through embedding lookup: the forward value is the table row
/// of each row's sampled index (argmax of `probs`), the gradient is that
/// of `probs @ table`.
pub fn dcse_embed(g: &mut Graph, probs: Var, table: Var) -> Result<Var> {
    let soft = dcse_soft(g, probs, table)?;
    let ids = hard_indices(g.value(probs));
    let t = g.value(table);
    let d = t.shape()[1];
    let mut hard = Vec::with_capacity(ids.len() * d);
    for &i in &ids {
        hard.extend_from_slice(t.row(i));
    }
    let hard = Array::new(vec![ids.len(), d], hard)?;
    Ok(g.straight_through(hard, soft)?)
}

/// The soft surrogate `probs @ table`.
pub fn dcse_soft(g: &mut Graph, probs: Var, table: Var) -> Result<Var> {
    let (ps, ts) = (g.shape(probs).to_vec(), g.shape(table).to_vec());
    if ps.len() != 2 || ts.len() != 2 || ps[1] != ts[0] {
        return Err(Error::Layout(format!("probabilities {ps:?} do not match table {ts:?}")));
    }
    Ok(g.matmul(probs, table)?)
}

/// Embeddings for a partially decided sequence: rows with a fixed id take
/// that table row as a constant; the others go through [`dcse_embed`].
pub fn token_embeddings(g: &mut Graph, probs: Var, table: Var, fixed: &[Option<usize>]) -> Result<Var> {
    let n = g.shape(probs)[0];
    if fixed.len() != n {
        return Err(Error::Layout(format!("{} fixed entries for {n} rows", fixed.len())));
    }
    let e = dcse_embed(g, probs, table)?;
    if fixed.iter().all(Option::is_none) {
        return Ok(e);
    }
    let t = g.value(table).clone();
    let d = t.shape()[1];
    let mut keep = vec![0.0; n * d];
    let mut rows = vec![0.0; n * d];
    for (r, f) in fixed.iter().enumerate() {
        match f {
            Some(id) => rows[r * d..(r + 1) * d].copy_from_slice(t.row(*id)),
            None => keep[r * d..(r + 1) * d].fill(1.0),
        }
    }
    let keep = g.constant(Array::new(vec![n, d], keep)?);
    let rows = g.constant(Array::new(vec![n, d], rows)?);
    let e = g.mul(e, keep)?;
    Ok(g.add(e, rows)?)
}

/// Mean Euclidean distance between `positions` (`[T, J, 3]`) and the
/// controlled targets.
pub fn consistency_loss(g: &mut Graph, positions: Var, s: &SpatialControl) -> Result<Var> {
    let shape = g.shape(positions).to_vec();
    let p = g.reshape(positions, &[1, shape[0], shape[1], shape[2]])?;
    consistency_loss_batch(g, p, std::slice::from_ref(s))
}

/// Batch mean of per-sample consistency losses; `positions` is
/// `[B, T, J, 3]` with one control per sample.
pub fn consistency_loss_batch(g: &mut Graph, positions: Var, controls: &[SpatialControl]) -> Result<Var> {
    let shape = g.shape(positions).to_vec();
    let (b, t, j) = match shape.as_slice() {
        [b, t, j, 3] => (*b, *t, *j),
        s => return Err(Error::Layout(format!("positions must be [B, T, J, 3], got {s:?}"))),
    };
    if controls.len() != b {
        return Err(Error::Layout(format!("{} controls for {b} samples", controls.len())));
    }
    let mut targets = Vec::with_capacity(b * t * j * 3);
    let mut weights = Vec::with_capacity(b * t * j);
    for s in controls {
        if s.frames() != t || s.joints() != j {
            return Err(Error::Control(format!(
                "control of {} frames x {} joints for motion of {t} x {j}",
                s.frames(),
                s.joints()
            )));
        }
        let active = s.active_count();
        if active == 0 {
            return Err(Error::Control("spatial control has no active entries".into()));
        }
        targets.extend_from_slice(s.targets().data());
        let w = 1.0 / (active as f64 * b as f64);
        weights.extend(s.mask().data().iter().map(|m| m * w));
    }
    let tv = g.constant(Array::new(shape.clone(), targets)?);
    let diff = g.sub(positions, tv)?;
    let dist = g.norm(diff)?;
    let wv = g.constant(Array::new(vec![b, t, j], weights)?);
    let wd = g.mul(dist, wv)?;
    Ok(g.sum(wd)?)
}

/// `alpha * nll + (1 - alpha) * ls`.
pub fn combined_train_loss(g: &mut Graph, nll: Var, ls: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let a = g.scale(nll, alpha)?;
    let b = g.scale(ls, 1.0 - alpha)?;
    Ok(g.add(a, b)?)
}

/// Plain gradient descent `x <- x - lr * grad` for `steps` steps. The
/// returned trace holds the loss before each step and after the last.
pub fn gradient_descent<F>(
    x0: &Array,
    mut loss_fn: F,
    lr: f64,
    steps: usize,
    stage: &'static str,
) -> Result<(Array, Vec<f64>)>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut x = x0.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    if steps == 0 {
        return Ok((x, trace));
    }
    for step in 0..=steps {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let loss = loss_fn(&mut g, v).map_err(|e| match e {
            Error::Diff(d) => Error::Numeric {
                stage,
                step,
                detail: d.to_string(),
            },
            other => other,
        })?;
        let lv = g.value(loss).item();
        trace.push(lv);
        if step == steps {
            break;
        }
        let grad = g.backward(loss)?.wrt(v);
        if !grad.is_finite() {
            return Err(Error::Numeric {
                stage,
                step,
                detail: "non-finite gradient".into(),
            });
        }
        for (a, d) in x.data_mut().iter_mut().zip(grad.data()) {
            *a -= lr * d;
        }
    }
    Ok((x, trace))
}

/// Gradient descent on logits (`t x K`).
pub fn logit_edit<F>(l0: &Array, loss_fn: F, lr: f64, steps: usize) -> Result<(Array, Vec<f64>)>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    gradient_descent(l0, loss_fn, lr, steps, "logit edit")
}

/// Gradient descent on the selected embedding vectors (`t x d`); the
/// stored codebook is not touched.
pub fn codebook_edit<F>(e0: &Array, loss_fn: F, lr: f64, steps: usize) -> Result<(Array, Vec<f64>)>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    gradient_descent(e0, loss_fn, lr, steps, "codebook edit")
}

/// `||p - center|| - radius`.
pub fn sdf_sphere(p: [f64; 3], center: [f64; 3], radius: f64) -> f64 {
    let d: f64 = (0..3).map(|i| (p[i] - center[i]).powi(2)).sum();
    d.sqrt() - radius
}

/// Sphere obstacle with a per-frame (or constant) center.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    /// One center, or one per frame.
    pub centers: Vec<[f64; 3]>,
    pub radius: f64,
    pub safe_distance: f64,
}

impl Obstacle {
    pub fn sphere(center: [f64; 3], radius: f64, safe_distance: f64) -> Result<Self> {
        let o = Self {
            centers: vec![center],
            radius,
            safe_distance,
        };
        o.validate()?;
        Ok(o)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !(self.safe_distance >= 0.0) || self.centers.is_empty() {
            return Err(Error::Invalid(format!(
                "obstacle needs radius > 0, safe distance >= 0, and a center (got r={}, d={})",
                self.radius, self.safe_distance
            )));
        }
        Ok(())
    }

    pub fn center(&self, frame: usize) -> [f64; 3] {
        if self.centers.len() == 1 {
            self.centers[0]
        } else {
            self.centers[frame.min(self.centers.len() - 1)]
        }
    }
}

/// `sum over obstacles and selected (frame, joint) of -min(SDF, d)`.
/// `positions` is `[T, J, 3]`; `selector` is a `T x J` 0/1 mask.
pub fn obstacle_loss(g: &mut Graph, positions: Var, obstacles: &[Obstacle], selector: &Array) -> Result<Var> {
    if obstacles.is_empty() {
        return Err(Error::Invalid("no obstacles".into()));
    }
    let shape = g.shape(positions).to_vec();
    let (t, j) = match shape.as_slice() {
        [t, j, 3] => (*t, *j),
        s => return Err(Error::Layout(format!("positions must be [T, J, 3], got {s:?}"))),
    };
    if selector.shape() != [t, j] {
        return Err(Error::Layout(format!("selector {:?} for {t} x {j}", selector.shape())));
    }
    let sel = g.constant(selector.clone());
    let mut total = None;
    for o in obstacles {
        o.validate()?;
        let mut centers = Vec::with_capacity(t * j * 3);
        for n in 0..t {
            let c = o.center(n);
            for _ in 0..j {
                centers.extend_from_slice(&c);
            }
        }
        let c = g.constant(Array::new(shape.clone(), centers)?);
        let diff = g.sub(positions, c)?;
        let dist = g.norm(diff)?;
        let sdf = g.offset(dist, -o.radius)?;
        let clamped = g.min_const(sdf, o.safe_distance)?;
        let picked = g.mul(clamped, sel)?;
        let s = g.sum(picked)?;
        let s = g.neg(s)?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(total.expect("at least one obstacle"))
}

/// Stand-in decoder input for MASK: the mean of the base-level rows.
pub fn mask_embedding(book: &Codebook<Array>) -> Result<Vec<f64>> {
    let k = book.size();
    if book.depth() == 0 || k == 0 {
        return Err(Error::Invalid("empty codebook".into()));
    }
    let d = book.dim();
    let mut mean = vec![0.0; d];
    for row in book.base().data().chunks(d) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    Ok(mean.into_iter().map(|m| m / k as f64).collect())
}

/// Writes a `step,loss` CSV.
pub fn write_loss_trace(path: impl AsRef<Path>, trace: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:e}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
