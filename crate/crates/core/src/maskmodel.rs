//! Label-conditioned bidirectional masked transformer, residual-level head,
//! and the control branch.
//!
//! Inputs are `t` token ids (`MASK = K`) preceded by one condition token
//! (label embedding; row `C` is the NULL label used for guidance). The
//! control branch is a trainable copy of the transformer blocks whose
//! input additionally receives a projection of the spatial signal; the
//! output of its block `k` enters the base stream after base block `k`
//! through a zero-initialized linear connector.

use std::f64::consts::PI;

use diffcore::{Array, Graph, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{ControlTrainConfig, RunConfig, TransformerConfig};
use crate::editctl;
use crate::error::{Error, Result};
use crate::kinematics::{recover_global_var, GlobalMotion, SpatialControl, NUM_CLASSES};
use crate::nn::{
    bind_constants, bind_params, collect_grads, param_tree, uniform_array, warmup_cosine_lr, AdamW, LayerNorm, Linear,
};
use crate::rng::{stream, substream, Rng};
use crate::tokenizer::{Codebook, TokenSeq, TokenizerWeights, DOWNSAMPLE};

/// Channels per (frame, joint) in the spatial signal: target xyz, mask,
/// and mask-weighted offset of the target from the provisional motion.
pub const SPATIAL_CHANNELS: usize = 7;

/// Sizes shared by the transformer weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub codebook_size: usize,
    pub code_dim: usize,
    pub levels: usize,
    pub tokens: usize,
    pub classes: usize,
    pub joints: usize,
    pub embed: usize,
    pub heads: usize,
    pub ff: usize,
    pub layers: usize,
}

impl ModelDims {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            codebook_size: cfg.tokenizer.codebook_size,
            code_dim: cfg.tokenizer.code_dim,
            levels: cfg.tokenizer.levels,
            tokens: cfg.frames / DOWNSAMPLE,
            classes: NUM_CLASSES,
            joints: cfg.skeleton.joints,
            embed: cfg.transformer.embed,
            heads: cfg.transformer.heads,
            ff: cfg.transformer.ff,
            layers: cfg.transformer.layers,
        }
    }

    pub fn mask_id(&self) -> usize {
        self.codebook_size
    }

    pub fn null_label(&self) -> usize {
        self.classes
    }

    pub fn spatial_width(&self) -> usize {
        DOWNSAMPLE * self.joints * SPATIAL_CHANNELS
    }

    fn label_row(&self, label: Option<usize>) -> Result<usize> {
        match label {
            None => Ok(self.null_label()),
            Some(l) if l < self.classes => Ok(l),
            Some(l) => Err(Error::Invalid(format!("label {l} outside {} classes", self.classes))),
        }
    }
}

/// Token ids in `[0, K]`, where `K` marks a masked position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedTokens {
    ids: Vec<usize>,
    mask_id: usize,
}

impl MaskedTokens {
    pub fn new(ids: Vec<usize>, mask_id: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i > mask_id) {
            return Err(Error::Invalid(format!("token id {bad} exceeds mask id {mask_id}")));
        }
        Ok(Self { ids, mask_id })
    }

    pub fn all_masked(len: usize, mask_id: usize) -> Self {
        Self {
            ids: vec![mask_id; len],
            mask_id,
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mask_id(&self) -> usize {
        self.mask_id
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.ids[pos] == self.mask_id
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.is_masked(p)).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.ids.iter().filter(|&&i| i == self.mask_id).count()
    }

    /// The ids, or an error if any position is still masked.
    pub fn unmasked_ids(&self) -> Result<Vec<usize>> {
        if self.masked_count() > 0 {
            return Err(Error::Invalid(format!(
                "{} positions still masked",
                self.masked_count()
            )));
        }
        Ok(self.ids.clone())
    }
}

/// Fraction of tokens still masked after step `i` of `total`: `cos(pi i / 2 total)`.
pub fn mask_schedule(i: usize, total: usize) -> Result<f64> {
    if i >= total {
        return Err(Error::Invalid(format!("schedule step {i} outside 0..{total}")));
    }
    Ok((PI * i as f64 / (2.0 * total as f64)).cos())
}

/// Replaces `ceil(ratio * t)` uniformly chosen positions (at least one)
/// with MASK.
pub fn corrupt(tokens: &[usize], ratio: f64, mask_id: usize, rng: &mut Rng) -> Result<MaskedTokens> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Invalid(format!("mask ratio {ratio} outside (0, 1]")));
    }
    let t = tokens.len();
    let n = ((ratio * t as f64).ceil() as usize).clamp(1, t);
    let mut order: Vec<usize> = (0..t).collect();
    order.shuffle(rng);
    let mut ids = tokens.to_vec();
    for &p in &order[..n] {
        ids[p] = mask_id;
    }
    MaskedTokens::new(ids, mask_id)
}

/// Training-time mask ratio `cos(pi u / 2)`, `u ~ U(0, 1)`.
pub fn sample_mask_ratio(rng: &mut Rng) -> f64 {
    let u: f64 = rng.gen();
    (PI * u / 2.0).cos().max(1e-9)
}

/// Replaces the label with NULL with probability `rate`.
pub fn label_dropout(label: usize, rate: f64, rng: &mut Rng) -> Option<usize> {
    if rng.gen::<f64>() < rate {
        None
    } else {
        Some(label)
    }
}

/// `uncond + scale * (cond - uncond)`.
pub fn cfg_logits(cond: &Array, uncond: &Array, scale: f64) -> Result<Array> {
    if cond.shape() != uncond.shape() {
        return Err(Error::Layout(format!(
            "guidance shapes {:?} and {:?}",
            cond.shape(),
            uncond.shape()
        )));
    }
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(c, u)| u + scale * (c - u))
        .collect();
    Ok(Array::new(cond.shape().to_vec(), data)?)
}

/// Row-wise `log(sum(exp(x)))` of `[N, K]` with a stop-gradient row max.
pub fn logsumexp_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (n, k) = (shape[0], shape[1]);
    let maxes: Vec<f64> = g
        .value(x)
        .data()
        .chunks(k)
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let m = g.constant(Array::new(vec![n, 1], maxes.clone())?);
    let me = g.expand(m, &[n, k])?;
    let shifted = g.sub(x, me)?;
    let e = g.exp(shifted)?;
    let s = g.sum_axis(e, 1)?;
    let l = g.log(s)?;
    let m1 = g.constant(Array::from_vec(maxes));
    Ok(g.add(l, m1)?)
}

/// Mean over `rows` of `-log softmax(logits[r])[targets[r]]`; `logits`
/// is `[N, K]` and `targets` has one entry per row.
pub fn masked_nll(g: &mut Graph, logits: Var, targets: &[usize], rows: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let (n, k) = match shape.as_slice() {
        [n, k] => (*n, *k),
        s => return Err(Error::Layout(format!("logits must be [N, K], got {s:?}"))),
    };
    if rows.is_empty() {
        return Err(Error::Invalid("no masked positions".into()));
    }
    if targets.len() != n {
        return Err(Error::Layout(format!("{} targets for {n} rows", targets.len())));
    }
    let w = 1.0 / rows.len() as f64;
    let mut row_w = vec![0.0; n];
    let mut pick = vec![0.0; n * k];
    for &r in rows {
        if targets[r] >= k {
            return Err(Error::Invalid(format!("target {} outside {k} classes", targets[r])));
        }
        row_w[r] += w;
        pick[r * k + targets[r]] += w;
    }
    let lse = logsumexp_rows(g, logits)?;
    let rw = g.constant(Array::from_vec(row_w));
    let a = g.mul(lse, rw)?;
    let a = g.sum(a)?;
    let pk = g.constant(Array::new(vec![n, k], pick)?);
    let b = g.mul(logits, pk)?;
    let b = g.sum(b)?;
    Ok(g.sub(a, b)?)
}

/// Re-masks the `keep_masked` lowest-confidence positions that are not
/// frozen; confidence is the probability of the sampled id. Ties go to the
/// lower position.
pub fn confidence_remask(
    probs: &Array,
    sampled: &[usize],
    keep_masked: usize,
    frozen: &[bool],
    mask_id: usize,
) -> Result<MaskedTokens> {
    let (t, k) = match probs.shape() {
        [t, k] => (*t, *k),
        s => return Err(Error::Layout(format!("probabilities must be t x K, got {s:?}"))),
    };
    if sampled.len() != t || frozen.len() != t {
        return Err(Error::Layout("sampled/frozen length differs from probabilities".into()));
    }
    let free: Vec<usize> = (0..t).filter(|&p| !frozen[p]).collect();
    if keep_masked > free.len() {
        return Err(Error::Invalid(format!(
            "cannot keep {keep_masked} masked with only {} free positions",
            free.len()
        )));
    }
    let conf = |p: usize| probs.data()[p * k + sampled[p]];
    let mut order = free;
    order.sort_by(|&a, &b| conf(a).total_cmp(&conf(b)).then(a.cmp(&b)));
    let mut ids = sampled.to_vec();
    for &p in &order[..keep_masked] {
        ids[p] = mask_id;
    }
    MaskedTokens::new(ids, mask_id)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}
param_tree!(Block {
    leaves: [],
    subs: [ln1, qkv, proj, ln2, ff1, ff2],
    vecs: []
});

impl Block<Array> {
    fn init(rng: &mut Rng, e: usize, ff: usize) -> Self {
        Self {
            ln1: LayerNorm::init(e),
            qkv: Linear::init(rng, e, 3 * e),
            proj: Linear::init(rng, e, e),
            ln2: LayerNorm::init(e),
            ff1: Linear::init(rng, e, ff),
            ff2: Linear::init(rng, ff, e),
        }
    }
}

impl Block<Var> {
    /// Pre-norm self-attention and feed-forward over `[B, n, E]`.
    pub fn forward(&self, g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, n, e) = (s[0], s[1], s[2]);
        let dh = e / heads;
        let h = self.ln1.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let p = g.slice(qkv, 2, i * e, e)?;
            let p = g.reshape(p, &[b, n, heads, dh])?;
            let p = g.permute(p, &[0, 2, 1, 3])?;
            parts.push(g.reshape(p, &[b * heads, n, dh])?);
        }
        let kt = g.transpose(parts[1])?;
        let att = g.matmul(parts[0], kt)?;
        let att = g.scale(att, 1.0 / (dh as f64).sqrt())?;
        let att = g.softmax(att)?;
        let o = g.matmul(att, parts[2])?;
        let o = g.reshape(o, &[b, heads, n, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, n, e])?;
        let o = self.proj.forward(g, o)?;
        let x = g.add(x, o)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.ff1.forward(g, h)?;
        let h = g.relu(h)?;
        let h = self.ff2.forward(g, h)?;
        Ok(g.add(x, h)?)
    }
}

/// Per-token classifier for residual levels, conditioned on the running
/// sum of earlier levels' embeddings, a level embedding, and the label.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualHead<T> {
    pub input: Linear<T>,
    pub level_emb: T,
    pub label_emb: T,
    pub ln: LayerNorm<T>,
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}
param_tree!(ResidualHead {
    leaves: [level_emb, label_emb],
    subs: [input, ln, hidden, out],
    vecs: []
});

impl ResidualHead<Var> {
    /// Per-token classifier. `running` is `[B, t, d]`, `labels` one row
    /// per sequence; returns `[B, t, K]` logits for `level`.
    pub fn forward(&self, g: &mut Graph, running: Var, level: usize, labels: &[usize]) -> Result<Var> {
        let s = g.shape(running).to_vec();
        let (b, t) = (s[0], s[1]);
        if labels.len() != b {
            return Err(Error::Layout(format!("{} labels for {b} sequences", labels.len())));
        }
        let x = self.input.forward(g, running)?;
        let e = g.shape(x)[2];
        let lv = g.gather(self.level_emb, &[level])?;
        let lv = g.reshape(lv, &[1, 1, e])?;
        let lv = g.expand(lv, &[b, t, e])?;
        let lb = g.gather(self.label_emb, labels)?;
        let lb = g.reshape(lb, &[b, 1, e])?;
        let lb = g.expand(lb, &[b, t, e])?;
        let x = g.add(x, lv)?;
        let x = g.add(x, lb)?;
        let h = self.ln.forward(g, x)?;
        let h = self.hidden.forward(g, h)?;
        let h = g.relu(h)?;
        let h = g.add(x, h)?;
        self.out.forward(g, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseNet<T> {
    pub token_emb: T,
    pub pos_emb: T,
    pub label_emb: T,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
    pub head: Linear<T>,
    pub residual: ResidualHead<T>,
}
param_tree!(BaseNet {
    leaves: [token_emb, pos_emb, label_emb],
    subs: [ln_f, head, residual],
    vecs: [blocks]
});

#[derive(Clone, Debug, PartialEq)]
pub struct ControlNet<T> {
    pub spatial: Linear<T>,
    pub blocks: Vec<Block<T>>,
    pub connectors: Vec<Linear<T>>,
}
param_tree!(ControlNet {
    leaves: [],
    subs: [spatial],
    vecs: [blocks, connectors]
});

#[derive(Clone, Debug, PartialEq)]
pub struct BaseWeights {
    pub dims: ModelDims,
    pub net: BaseNet<Array>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlWeights {
    pub dims: ModelDims,
    pub net: ControlNet<Array>,
}

const EMB_INIT: f64 = 0.1;

impl BaseWeights {
    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        let mut rng = substream(seed, stream::INIT);
        let rng = &mut rng;
        let (e, k) = (dims.embed, dims.codebook_size);
        let net = BaseNet {
            token_emb: uniform_array(rng, &[k + 1, e], EMB_INIT),
            pos_emb: uniform_array(rng, &[dims.tokens + 1, e], EMB_INIT),
            label_emb: uniform_array(rng, &[dims.classes + 1, e], EMB_INIT),
            blocks: (0..dims.layers).map(|_| Block::init(rng, e, dims.ff)).collect(),
            ln_f: LayerNorm::init(e),
            head: Linear::init(rng, e, k),
            residual: ResidualHead {
                input: Linear::init(rng, dims.code_dim, e),
                level_emb: uniform_array(rng, &[dims.levels, e], EMB_INIT),
                label_emb: uniform_array(rng, &[dims.classes + 1, e], EMB_INIT),
                ln: LayerNorm::init(e),
                hidden: Linear::init(rng, e, e),
                out: Linear::init(rng, e, k),
            },
        };
        Self {
            dims: dims.clone(),
            net,
        }
    }
}

impl ControlWeights {
    /// Copies the base blocks; the spatial projection and the connectors
    /// start at exactly zero.
    pub fn init(base: &BaseWeights) -> Self {
        let dims = &base.dims;
        let net = ControlNet {
            spatial: Linear::zeros(dims.spatial_width(), dims.embed),
            blocks: base.net.blocks.clone(),
            connectors: (0..dims.layers)
                .map(|_| Linear::zeros(dims.embed, dims.embed))
                .collect(),
        };
        Self {
            dims: dims.clone(),
            net,
        }
    }
}

/// Transformer forward over a batch. `ids` holds `B * t` ids, `labels`
/// `B` label rows. With a control branch, `spatial` is `[B, t, W]`.
/// Returns `[B, t, K]` logits.
pub fn transformer_forward(
    g: &mut Graph,
    base: &BaseNet<Var>,
    control: Option<(&ControlNet<Var>, Var)>,
    ids: &[usize],
    labels: &[usize],
    heads: usize,
) -> Result<Var> {
    let b = labels.len();
    let t = ids.len() / b.max(1);
    if b == 0 || t * b != ids.len() {
        return Err(Error::Layout(format!("{} ids for {b} sequences", ids.len())));
    }
    let e = g.shape(base.token_emb)[1];
    let tok = g.gather(base.token_emb, ids)?;
    let tok = g.reshape(tok, &[b, t, e])?;
    let lab = g.gather(base.label_emb, labels)?;
    let lab = g.reshape(lab, &[b, 1, e])?;
    let h = g.concat(&[lab, tok], 1)?;
    let pos = g.slice(base.pos_emb, 0, 0, t + 1)?;
    let pos = g.expand(pos, &[b, t + 1, e])?;
    let mut h = g.add(h, pos)?;

    let mut c = match control {
        Some((net, spatial)) => {
            let sp = net.spatial.forward(g, spatial)?;
            let zero = g.constant(Array::zeros(&[b, 1, e]));
            let sp = g.concat(&[zero, sp], 1)?;
            Some(g.add(h, sp)?)
        }
        None => None,
    };
    for (k, block) in base.blocks.iter().enumerate() {
        h = block.forward(g, h, heads)?;
        if let (Some((net, _)), Some(ch)) = (control, c) {
            let ch = net.blocks[k].forward(g, ch, heads)?;
            let inject = net.connectors[k].forward(g, ch)?;
            h = g.add(h, inject)?;
            c = Some(ch);
        }
    }
    let h = base.ln_f.forward(g, h)?;
    let h = g.slice(h, 1, 1, t)?;
    base.head.forward(g, h)
}

/// Batched inference logits `[B, t, K]`.
pub fn predict_logits(
    base: &BaseWeights,
    control: Option<&ControlWeights>,
    inputs: &[&MaskedTokens],
    labels: &[Option<usize>],
    spatial: Option<&[Array]>,
) -> Result<Array> {
    let dims = &base.dims;
    if inputs.len() != labels.len() {
        return Err(Error::Layout("one label per input required".into()));
    }
    let mut ids = Vec::new();
    for x in inputs {
        if x.len() > dims.tokens || x.mask_id() != dims.mask_id() {
            return Err(Error::Layout(format!(
                "input of {} tokens (mask id {}) does not fit the model",
                x.len(),
                x.mask_id()
            )));
        }
        ids.extend_from_slice(x.ids());
    }
    let rows = labels.iter().map(|&l| dims.label_row(l)).collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let bn = bind_constants(&mut g, &base.net);
    let logits = match (control, spatial) {
        (Some(cw), Some(sp)) => {
            let t = inputs[0].len();
            let cn = bind_constants(&mut g, &cw.net);
            let sv = g.constant(stack(sp, &[t, dims.spatial_width()])?);
            transformer_forward(&mut g, &bn, Some((&cn, sv)), &ids, &rows, dims.heads)?
        }
        (None, None) => transformer_forward(&mut g, &bn, None, &ids, &rows, dims.heads)?,
        _ => {
            return Err(Error::Invalid(
                "control weights and spatial features go together".into(),
            ))
        }
    };
    Ok(g.value(logits).clone())
}

fn stack(items: &[Array], shape: &[usize]) -> Result<Array> {
    let mut data = Vec::with_capacity(items.len() * shape.iter().product::<usize>());
    for a in items {
        if a.shape() != shape {
            return Err(Error::Layout(format!("expected {shape:?}, got {:?}", a.shape())));
        }
        data.extend_from_slice(a.data());
    }
    let mut full = vec![items.len()];
    full.extend_from_slice(shape);
    Ok(Array::new(full, data)?)
}

fn first(logits: Array) -> Result<Array> {
    let s = logits.shape().to_vec();
    Ok(Array::new(vec![s[1], s[2]], logits.data()[..s[1] * s[2]].to_vec())?)
}

/// `t x K` logits from the base model.
pub fn forward_base(x: &MaskedTokens, label: Option<usize>, w: &BaseWeights) -> Result<Array> {
    first(predict_logits(w, None, &[x], &[label], None)?)
}

/// `t x K` logits with the control branch; `spatial` is `t x W` from
/// [`spatial_features`].
pub fn forward_controlled(
    x: &MaskedTokens,
    label: Option<usize>,
    spatial: &Array,
    base: &BaseWeights,
    control: &ControlWeights,
) -> Result<Array> {
    first(predict_logits(
        base,
        Some(control),
        &[x],
        &[label],
        Some(std::slice::from_ref(spatial)),
    )?)
}

/// Per-token spatial signal `t x (4 J 7)`: each token sees its four frames
/// of `[S, sigma, sigma (S - provisional)]` per joint.
pub fn spatial_features(s: &SpatialControl, provisional: Option<&GlobalMotion>) -> Result<Array> {
    let (frames, j) = (s.frames(), s.joints());
    if frames % DOWNSAMPLE != 0 {
        return Err(Error::Control(format!(
            "{frames} control frames not divisible by {DOWNSAMPLE}"
        )));
    }
    if let Some(p) = provisional {
        if p.frames() != frames || p.joints() != j {
            return Err(Error::Control(
                "provisional motion does not match control layout".into(),
            ));
        }
    }
    let t = frames / DOWNSAMPLE;
    let w = DOWNSAMPLE * j * SPATIAL_CHANNELS;
    let mut out = Array::zeros(&[t, w]);
    let data = out.data_mut();
    for n in 0..frames {
        for jj in 0..j {
            if !s.is_active(n, jj) {
                continue;
            }
            let target = s.target(n, jj);
            let o = (n / DOWNSAMPLE) * w + ((n % DOWNSAMPLE) * j + jj) * SPATIAL_CHANNELS;
            data[o..o + 3].copy_from_slice(&target);
            data[o + 3] = 1.0;
            if let Some(p) = provisional {
                let q = p.at(n, jj);
                for c in 0..3 {
                    data[o + 4 + c] = target[c] - q[c];
                }
            }
        }
    }
    Ok(out)
}

/// Fills residual levels `1..V` greedily for the given base ids with
/// guidance between the label and NULL.
pub fn predict_residual(
    base: &BaseWeights,
    codebook: &Codebook<Array>,
    base_ids: &[usize],
    label: Option<usize>,
    cfg_scale: f64,
) -> Result<TokenSeq> {
    let dims = &base.dims;
    let t = base_ids.len();
    let d = codebook.dim();
    let mut levels = vec![base_ids.to_vec()];
    let mut running = Array::zeros(&[t, d]);
    for v in 1..codebook.depth() {
        let prev = &codebook.levels[v - 1];
        for (p, &id) in levels[v - 1].iter().enumerate() {
            for c in 0..d {
                running.data_mut()[p * d + c] += prev.data()[id * d + c];
            }
        }
        let mut g = Graph::new();
        let head = bind_constants(&mut g, &base.net.residual);
        let r = g.constant(stack(&[running.clone(), running.clone()], &[t, d])?);
        let rows = [dims.label_row(label)?, dims.null_label()];
        let logits = head.forward(&mut g, r, v, &rows)?;
        let l = g.value(logits).data();
        let k = dims.codebook_size;
        let cond = Array::new(vec![t, k], l[..t * k].to_vec())?;
        let uncond = Array::new(vec![t, k], l[t * k..].to_vec())?;
        let guided = cfg_logits(&cond, &uncond, cfg_scale)?;
        levels.push(guided.data().chunks(k).map(argmax).collect());
    }
    TokenSeq::from_levels(&levels)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageLog {
    pub epoch_loss: Vec<f64>,
    /// Masked NLL component per epoch.
    pub epoch_nll: Vec<f64>,
    /// Consistency (control stage) or residual-head loss (base stage).
    pub epoch_aux: Vec<f64>,
}

fn numeric(stage: &'static str, step: usize, what: f64) -> Error {
    Error::Numeric {
        stage,
        step,
        detail: format!("loss {what}"),
    }
}

/// One training example for the transformer stages.
#[derive(Clone, Debug)]
pub struct TokenExample {
    pub tokens: TokenSeq,
    pub label: usize,
    pub global: GlobalMotion,
}

/// Trains the base transformer (masked NLL over random mask ratios, 10%
/// label dropout) and the residual head.
pub fn train_base(
    data: &[TokenExample],
    tokenizer: &TokenizerWeights,
    dims: &ModelDims,
    cfg: &TransformerConfig,
    seed: u64,
) -> Result<(BaseWeights, StageLog)> {
    if data.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut w = BaseWeights::init(dims, seed);
    let mut rng = substream(seed, stream::MASKING);
    let mut opt = AdamW::new(0.01, 1.0);
    let mut log = StageLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let bs = cfg.batch_size.max(1);
    let total = cfg.epochs * data.len().div_ceil(bs);
    let book = tokenizer.codebook();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sl, mut sn, mut sa, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for idx in order.chunks(bs) {
            let batch: Vec<&TokenExample> = idx.iter().map(|&i| &data[i]).collect();
            let mut ids = Vec::new();
            let mut targets = Vec::new();
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (bi, ex) in batch.iter().enumerate() {
                let base_ids = ex.tokens.level(0);
                let x = corrupt(&base_ids, sample_mask_ratio(&mut rng), dims.mask_id(), &mut rng)?;
                let t = base_ids.len();
                rows.extend(x.masked_positions().into_iter().map(|p| bi * t + p));
                ids.extend_from_slice(x.ids());
                targets.extend(base_ids);
                labels.push(dims.label_row(label_dropout(ex.label, cfg.label_dropout, &mut rng))?);
            }
            let mut g = Graph::new();
            let net = bind_params(&mut g, &w.net);
            let logits = transformer_forward(&mut g, &net, None, &ids, &labels, dims.heads)?;
            let logits = g.reshape(logits, &[ids.len(), dims.codebook_size])?;
            let nll = masked_nll(&mut g, logits, &targets, &rows)?;
            let aux = residual_loss(&mut g, &net.residual, book, &batch, &labels)?;
            let loss = match aux {
                Some(a) => g.add(nll, a)?,
                None => nll,
            };
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(numeric("base", step, lv));
            }
            let grads = g.backward(loss)?;
            let grads = collect_grads(&grads, &net);
            opt.update(&mut w.net, &grads, warmup_cosine_lr(cfg.lr, cfg.warmup, step, total));
            sl += lv;
            sn += g.value(nll).item();
            sa += aux.map_or(0.0, |a| g.value(a).item());
            nb += 1.0;
            step += 1;
        }
        log.epoch_loss.push(sl / nb);
        log.epoch_nll.push(sn / nb);
        log.epoch_aux.push(sa / nb);
    }
    Ok((w, log))
}

/// Cross-entropy of the residual head on every position of every level
/// above the base, given ground-truth earlier levels.
fn residual_loss(
    g: &mut Graph,
    head: &ResidualHead<Var>,
    book: &Codebook<Array>,
    batch: &[&TokenExample],
    labels: &[usize],
) -> Result<Option<Var>> {
    let d = book.dim();
    let mut total = None;
    for v in 1..book.depth() {
        let mut running = Vec::new();
        let mut targets = Vec::new();
        let t = batch[0].tokens.len();
        for ex in batch {
            for p in 0..t {
                let mut acc = vec![0.0; d];
                for u in 0..v {
                    let id = ex.tokens.get(p, u);
                    for (a, x) in acc.iter_mut().zip(&book.levels[u].data()[id * d..(id + 1) * d]) {
                        *a += x;
                    }
                }
                running.extend(acc);
                targets.push(ex.tokens.get(p, v));
            }
        }
        let n = targets.len();
        let r = g.constant(Array::new(vec![batch.len(), t, d], running)?);
        let logits = head.forward(g, r, v, labels)?;
        let logits = g.reshape(logits, &[n, book.size()])?;
        let all: Vec<usize> = (0..n).collect();
        let l = masked_nll(g, logits, &targets, &all)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    Ok(total)
}

/// Random training control drawn from a ground-truth motion: a random
/// joint set and a random number of keyframes from `{1, 2, 5, T/4, T}`.
pub fn sample_training_control(global: &GlobalMotion, rng: &mut Rng) -> Result<SpatialControl> {
    let (t, j) = (global.frames(), global.joints());
    let levels = [1, 2, 5, t / 4, t];
    let count = levels[rng.gen_range(0..levels.len())].clamp(1, t);
    let joints: Vec<usize> = if rng.gen_bool(0.5) {
        vec![rng.gen_range(0..j)]
    } else {
        let mut js: Vec<usize> = (0..j).filter(|_| rng.gen_bool(0.5)).collect();
        if js.is_empty() {
            js.push(rng.gen_range(0..j));
        }
        js
    };
    let mut frames: Vec<usize> = (0..t).collect();
    frames.shuffle(rng);
    let mut s = SpatialControl::empty(t, j);
    for &jj in &joints {
        for &n in &frames[..count] {
            s.set(n, jj, global.at(n, jj));
        }
    }
    Ok(s)
}

/// Base-level embeddings for `ids` with MASK positions replaced by
/// `mask_emb`, as `t x d`.
pub fn provisional_embeddings(ids: &MaskedTokens, book: &Array, mask_emb: &[f64]) -> Array {
    let d = mask_emb.len();
    let mut out = Array::zeros(&[ids.len(), d]);
    for (p, &id) in ids.ids().iter().enumerate() {
        let row = if ids.is_masked(p) {
            mask_emb
        } else {
            &book.data()[id * d..(id + 1) * d]
        };
        out.data_mut()[p * d..(p + 1) * d].copy_from_slice(row);
    }
    out
}

/// Decodes provisional motions for a batch of partially masked inputs.
pub fn provisional_motion(
    inputs: &[&MaskedTokens],
    tokenizer: &TokenizerWeights,
    mask_emb: &[f64],
) -> Result<Vec<GlobalMotion>> {
    let t = inputs[0].len();
    let embs: Vec<Array> = inputs
        .iter()
        .map(|x| provisional_embeddings(x, tokenizer.codebook().base(), mask_emb))
        .collect();
    let e = stack(&embs, &[t, tokenizer.config.code_dim])?;
    tokenizer
        .decode_batch(&e)?
        .iter()
        .map(crate::kinematics::recover_global)
        .collect()
}

/// Trains the control branch with `alpha * NLL + (1 - alpha) * L_s`; the
/// consistency term flows through DCSE sampling of masked positions,
/// the frozen decoder, and position recovery. Base and tokenizer weights
/// enter the graph as constants.
pub fn train_control(
    data: &[TokenExample],
    base: &BaseWeights,
    tokenizer: &TokenizerWeights,
    cfg: &ControlTrainConfig,
    seed: u64,
) -> Result<(ControlWeights, StageLog)> {
    if data.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let dims = &base.dims;
    let mut w = ControlWeights::init(base);
    let mut rng = substream(seed, crate::rng::stream::CONTROL_TRAIN);
    let mut gumbel_rng = substream(seed, stream::GUMBEL);
    let mask_emb = editctl::mask_embedding(tokenizer.codebook())?;
    let book = tokenizer.codebook().base().clone();
    let (k, d) = (dims.codebook_size, dims.code_dim);
    let mut opt = AdamW::new(0.0, 1.0);
    let mut log = StageLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let bs = cfg.batch_size.max(1);
    let total = cfg.epochs * data.len().div_ceil(bs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sl, mut sn, mut sa, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for idx in order.chunks(bs) {
            let batch: Vec<&TokenExample> = idx.iter().map(|&i| &data[i]).collect();
            let b = batch.len();
            let mut inputs = Vec::with_capacity(b);
            let mut controls = Vec::with_capacity(b);
            let mut labels = Vec::with_capacity(b);
            for ex in &batch {
                let base_ids = ex.tokens.level(0);
                inputs.push(corrupt(
                    &base_ids,
                    sample_mask_ratio(&mut rng),
                    dims.mask_id(),
                    &mut rng,
                )?);
                controls.push(sample_training_control(&ex.global, &mut rng)?);
                labels.push(dims.label_row(label_dropout(ex.label, cfg.label_dropout, &mut rng))?);
            }
            let refs: Vec<&MaskedTokens> = inputs.iter().collect();
            let prov = provisional_motion(&refs, tokenizer, &mask_emb)?;
            let spatial: Vec<Array> = controls
                .iter()
                .zip(&prov)
                .map(|(s, p)| spatial_features(s, Some(p)))
                .collect::<Result<_>>()?;
            let t = inputs[0].len();
            let ids: Vec<usize> = inputs.iter().flat_map(|x| x.ids().to_vec()).collect();
            let targets: Vec<usize> = batch.iter().flat_map(|ex| ex.tokens.level(0)).collect();
            let rows: Vec<usize> = inputs
                .iter()
                .enumerate()
                .flat_map(|(bi, x)| x.masked_positions().into_iter().map(move |p| bi * t + p))
                .collect();
            let fixed: Vec<Option<usize>> = inputs
                .iter()
                .flat_map(|x| {
                    x.ids()
                        .iter()
                        .map(|&i| (i != dims.mask_id()).then_some(i))
                        .collect::<Vec<_>>()
                })
                .collect();

            let mut g = Graph::new();
            let bn = bind_constants(&mut g, &base.net);
            let cn = bind_params(&mut g, &w.net);
            let sv = g.constant(stack(&spatial, &[t, dims.spatial_width()])?);
            let logits = transformer_forward(&mut g, &bn, Some((&cn, sv)), &ids, &labels, dims.heads)?;
            let logits = g.reshape(logits, &[b * t, k])?;
            let nll = masked_nll(&mut g, logits, &targets, &rows)?;

            let noise = editctl::gumbel_noise(&[b * t, k], &mut gumbel_rng);
            let probs = editctl::gumbel_softmax(&mut g, logits, Some(&noise), cfg.temperature)?;
            let table = g.constant(book.clone());
            let emb = editctl::token_embeddings(&mut g, probs, table, &fixed)?;
            let emb = g.reshape(emb, &[b, t, d])?;
            let dec = tokenizer.bind_decoder(&mut g);
            let feats = dec.decode(&mut g, emb)?;
            let pos = recover_global_var(&mut g, feats, dims.joints)?;
            let ls = editctl::consistency_loss_batch(&mut g, pos, &controls)?;
            let loss = editctl::combined_train_loss(&mut g, nll, ls, cfg.alpha)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(numeric("control", step, lv));
            }
            let grads = g.backward(loss)?;
            let grads = collect_grads(&grads, &cn);
            opt.update(&mut w.net, &grads, warmup_cosine_lr(cfg.lr, cfg.warmup, step, total));
            sl += lv;
            sn += g.value(nll).item();
            sa += g.value(ls).item();
            nb += 1.0;
            step += 1;
        }
        log.epoch_loss.push(sl / nb);
        log.epoch_nll.push(sn / nb);
        log.epoch_aux.push(sa / nb);
    }
    Ok((w, log))
}
