//! Motion tokenizer: temporal encoder, residual vector quantization, and
//! decoder back to local features.
//!
//! The encoder halves the frame rate twice (factor 4) by folding pairs of
//! frames into the channel axis; the decoder mirrors it. Features are
//! standardized per channel with statistics stored alongside the weights,
//! and [`DecoderVars::decode`] returns raw (de-standardized) features.

use diffcore::{Array, Graph, Var};
use rand::seq::SliceRandom;

use crate::config::TokenizerConfig;
use crate::error::{Error, Result};
use crate::kinematics::{feature_dim, MotionFeatures};
use crate::nn::{bind_constants, bind_params, collect_grads, param_tree, warmup_cosine_lr, AdamW, Linear, Tree};
use crate::rng::{substream, Rng};

pub const DOWNSAMPLE: usize = 4;
const STD_FLOOR: f64 = 0.01;

/// Residual codebook: one `K x d` table per level; level 0 is the base book.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    pub levels: Vec<T>,
}

impl<T> Tree<T> for Codebook<T> {
    type Out<U> = Codebook<U>;
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Codebook<U> {
        Codebook {
            levels: self.levels.iter().map(f).collect(),
        }
    }
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        for (i, x) in self.levels.iter().enumerate() {
            f(&crate::nn::join(prefix, &format!("level.{i}")), x);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        for (i, x) in self.levels.iter_mut().enumerate() {
            f(&crate::nn::join(prefix, &format!("level.{i}")), x);
        }
    }
}

impl Codebook<Array> {
    pub fn size(&self) -> usize {
        self.levels.first().map_or(0, |l| l.shape()[0])
    }

    pub fn dim(&self) -> usize {
        self.levels.first().map_or(0, |l| l.shape()[1])
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn base(&self) -> &Array {
        &self.levels[0]
    }

    /// Sum over levels of the selected rows, `t x d`.
    pub fn embed(&self, tokens: &TokenSeq) -> Result<Array> {
        let d = self.dim();
        let mut out = Array::zeros(&[tokens.len(), d]);
        for v in 0..tokens.levels().min(self.depth()) {
            let table = self.levels[v].data();
            for p in 0..tokens.len() {
                let id = tokens.get(p, v);
                if id >= self.size() {
                    return Err(Error::Invalid(format!(
                        "token id {id} outside codebook of {}",
                        self.size()
                    )));
                }
                let row = &table[id * d..(id + 1) * d];
                for (o, r) in out.data_mut()[p * d..(p + 1) * d].iter_mut().zip(row) {
                    *o += r;
                }
            }
        }
        Ok(out)
    }
}

/// `t x V` token ids in `[0, K)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<usize>,
    levels: usize,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>, levels: usize) -> Result<Self> {
        if levels == 0 || !ids.len().is_multiple_of(levels) {
            return Err(Error::Invalid(format!(
                "{} ids do not split into {levels} levels",
                ids.len()
            )));
        }
        Ok(Self { ids, levels })
    }

    /// Builds a sequence from per-level id lists of equal length.
    pub fn from_levels(levels: &[Vec<usize>]) -> Result<Self> {
        let t = levels.first().map_or(0, Vec::len);
        if levels.iter().any(|l| l.len() != t) {
            return Err(Error::Invalid("levels differ in length".into()));
        }
        let ids = (0..t).flat_map(|p| levels.iter().map(move |l| l[p])).collect();
        Self::new(ids, levels.len())
    }

    pub fn len(&self) -> usize {
        self.ids.len() / self.levels
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn get(&self, pos: usize, level: usize) -> usize {
        self.ids[pos * self.levels + level]
    }

    pub fn level(&self, level: usize) -> Vec<usize> {
        (0..self.len()).map(|p| self.get(p, level)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<T> {
    pub conv: Linear<T>,
    pub proj: Linear<T>,
}
param_tree!(ResBlock {
    leaves: [],
    subs: [conv, proj],
    vecs: []
});

impl ResBlock<Array> {
    fn init(rng: &mut Rng, c: usize) -> Self {
        Self {
            conv: Linear::init(rng, 3 * c, c),
            proj: Linear::init(rng, c, c),
        }
    }
}

/// `[B, n, C]` to `[B, n, 3C]`: previous, current, and next frame with
/// zero padding at the ends.
fn temporal_window(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    let zero = g.constant(Array::zeros(&[b, 1, c]));
    let head = g.slice(x, 1, 0, n - 1)?;
    let tail = g.slice(x, 1, 1, n - 1)?;
    let prev = g.concat(&[zero, head], 1)?;
    let next = g.concat(&[tail, zero], 1)?;
    Ok(g.concat(&[prev, x, next], 2)?)
}

impl ResBlock<Var> {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.relu(x)?;
        let h = temporal_window(g, h)?;
        let h = self.conv.forward(g, h)?;
        let h = g.relu(h)?;
        let h = self.proj.forward(g, h)?;
        Ok(g.add(x, h)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub input: Linear<T>,
    pub down: Vec<Linear<T>>,
    pub blocks: Vec<ResBlock<T>>,
    pub output: Linear<T>,
}
param_tree!(Encoder {
    leaves: [],
    subs: [input, output],
    vecs: [down, blocks]
});

impl Encoder<Var> {
    /// `[B, T, F]` standardized features to `[B, T/4, d]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.input.forward(g, x)?;
        let mut h = g.relu(h)?;
        for (down, block) in self.down.iter().zip(&self.blocks) {
            let s = g.shape(h).to_vec();
            let folded = g.reshape(h, &[s[0], s[1] / 2, 2 * s[2]])?;
            let d = down.forward(g, folded)?;
            let d = g.relu(d)?;
            h = block.forward(g, d)?;
        }
        self.output.forward(g, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub input: Linear<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub up: Vec<Linear<T>>,
    pub output: Linear<T>,
}
param_tree!(Decoder {
    leaves: [],
    subs: [input, output],
    vecs: [blocks, up]
});

impl Decoder<Var> {
    /// `[B, t, d]` latents to `[B, 4t, F]` standardized features.
    pub fn forward(&self, g: &mut Graph, e: Var) -> Result<Var> {
        let h = self.input.forward(g, e)?;
        let mut h = self.blocks[0].forward(g, h)?;
        for (up, block) in self.up.iter().zip(&self.blocks[1..]) {
            let s = g.shape(h).to_vec();
            let u = up.forward(g, h)?;
            let u = g.relu(u)?;
            let unfolded = g.reshape(u, &[s[0], s[1] * 2, s[2]])?;
            h = block.forward(g, unfolded)?;
        }
        self.output.forward(g, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerNet<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub codebook: Codebook<T>,
}
param_tree!(TokenizerNet {
    leaves: [],
    subs: [encoder, decoder, codebook],
    vecs: []
});

impl TokenizerNet<Array> {
    pub fn init(cfg: &TokenizerConfig, features: usize, rng: &mut Rng) -> Self {
        let c = cfg.hidden;
        let stages = 2;
        let encoder = Encoder {
            input: Linear::init(rng, features, c),
            down: (0..stages).map(|_| Linear::init(rng, 2 * c, c)).collect(),
            blocks: (0..stages).map(|_| ResBlock::init(rng, c)).collect(),
            output: Linear::init(rng, c, cfg.code_dim),
        };
        let decoder = Decoder {
            input: Linear::init(rng, cfg.code_dim, c),
            blocks: (0..=stages).map(|_| ResBlock::init(rng, c)).collect(),
            up: (0..stages).map(|_| Linear::init(rng, c, 2 * c)).collect(),
            output: Linear::init(rng, c, features),
        };
        let codebook = Codebook {
            levels: (0..cfg.levels)
                .map(|_| crate::nn::uniform_array(rng, &[cfg.codebook_size, cfg.code_dim], 1.0))
                .collect(),
        };
        Self {
            encoder,
            decoder,
            codebook,
        }
    }
}

/// Trained tokenizer with its feature standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerWeights {
    pub config: TokenizerConfig,
    pub joints: usize,
    pub mean: Array,
    pub std: Array,
    pub net: TokenizerNet<Array>,
}

/// Decoder weights bound into a graph as constants.
pub struct DecoderVars {
    net: Decoder<Var>,
    mean: Var,
    std: Var,
}

impl DecoderVars {
    /// `[B, t, d]` latents to raw `[B, 4t, F]` features.
    pub fn decode(&self, g: &mut Graph, e: Var) -> Result<Var> {
        let y = self.net.forward(g, e)?;
        let shape = g.shape(y).to_vec();
        let s = g.expand(self.std, &shape)?;
        let m = g.expand(self.mean, &shape)?;
        let y = g.mul(y, s)?;
        Ok(g.add(y, m)?)
    }
}

impl TokenizerWeights {
    /// Randomly initialized weights with identity standardization.
    pub fn init(cfg: &TokenizerConfig, joints: usize, seed: u64) -> Self {
        let f = feature_dim(joints);
        let mut rng = substream(seed, crate::rng::stream::INIT);
        Self {
            config: cfg.clone(),
            joints,
            mean: Array::zeros(&[f]),
            std: Array::full(&[f], 1.0),
            net: TokenizerNet::init(cfg, f, &mut rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.joints)
    }

    pub fn codebook(&self) -> &Codebook<Array> {
        &self.net.codebook
    }

    pub fn bind_decoder(&self, g: &mut Graph) -> DecoderVars {
        DecoderVars {
            net: bind_constants(g, &self.net.decoder),
            mean: g.constant(self.mean.clone()),
            std: g.constant(self.std.clone()),
        }
    }

    /// Standardizes a batch of feature sequences into `[B, T, F]`.
    fn standardize(&self, batch: &[&MotionFeatures]) -> Result<Array> {
        let f = self.feature_dim();
        let t = batch.first().map_or(0, |m| m.frames());
        let mut data = Vec::with_capacity(batch.len() * t * f);
        for m in batch {
            if m.joints() != self.joints || m.frames() != t {
                return Err(Error::Layout(format!(
                    "expected {t} frames of {} joints, got {} of {}",
                    self.joints,
                    m.frames(),
                    m.joints()
                )));
            }
            for row in m.array().data().chunks(f) {
                for (k, x) in row.iter().enumerate() {
                    data.push((x - self.mean.data()[k]) / self.std.data()[k]);
                }
            }
        }
        Ok(Array::new(vec![batch.len(), t, f], data)?)
    }

    fn check_frames(frames: usize) -> Result<()> {
        if frames == 0 || !frames.is_multiple_of(DOWNSAMPLE) {
            return Err(Error::Layout(format!(
                "frame count {frames} is not a positive multiple of {DOWNSAMPLE}"
            )));
        }
        Ok(())
    }

    /// Latents for a batch: `[B, T/4, d]`.
    pub fn encode_batch(&self, batch: &[&MotionFeatures]) -> Result<Array> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        Self::check_frames(batch[0].frames())?;
        let mut g = Graph::new();
        let enc = bind_constants(&mut g, &self.net.encoder);
        let x = g.constant(self.standardize(batch)?);
        let z = enc.forward(&mut g, x)?;
        Ok(g.value(z).clone())
    }

    /// Token sequences for many motions, encoded in chunks.
    pub fn tokenize_all(&self, motions: &[&MotionFeatures]) -> Result<Vec<TokenSeq>> {
        let mut out = Vec::with_capacity(motions.len());
        for chunk in motions.chunks(64) {
            let z = self.encode_batch(chunk)?;
            let (b, t, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
            for i in 0..b {
                let zi = Array::new(vec![t, d], z.data()[i * t * d..(i + 1) * t * d].to_vec())?;
                out.push(residual_quantize(&zi, self.codebook())?.0);
            }
        }
        Ok(out)
    }

    /// Decodes a batch `[B, t, d]` of summed embeddings to raw features.
    pub fn decode_batch(&self, e: &Array) -> Result<Vec<MotionFeatures>> {
        let mut g = Graph::new();
        let dec = self.bind_decoder(&mut g);
        let ev = g.constant(e.clone());
        let y = dec.decode(&mut g, ev)?;
        let y = g.value(y);
        let (b, t, f) = (y.shape()[0], y.shape()[1], y.shape()[2]);
        (0..b)
            .map(|i| {
                let a = Array::new(vec![t, f], y.data()[i * t * f..(i + 1) * t * f].to_vec())?;
                MotionFeatures::new(a, self.joints)
            })
            .collect()
    }
}

/// Encoder output `z`, `t x d`.
pub fn encode(f: &MotionFeatures, w: &TokenizerWeights) -> Result<Array> {
    let z = w.encode_batch(&[f])?;
    let (t, d) = (z.shape()[1], z.shape()[2]);
    Ok(z.reshape(&[t, d])?)
}

/// Raw features from a `t x d` latent or embedding sum.
pub fn decode(e: &Array, w: &TokenizerWeights) -> Result<MotionFeatures> {
    let (t, d) = match e.shape() {
        [t, d] if *d == w.config.code_dim => (*t, *d),
        s => {
            return Err(Error::Layout(format!(
                "latent of shape {s:?} does not match code dim {}",
                w.config.code_dim
            )))
        }
    };
    let batch = e.clone().reshape(&[1, t, d])?;
    Ok(w.decode_batch(&batch)?.remove(0))
}

/// Nearest row of `table` for each row of `z` (squared Euclidean distance,
/// ties to the lowest index). Returns the ids and the selected rows.
pub fn quantize(z: &Array, table: &Array) -> Result<(Vec<usize>, Array)> {
    let (k, d) = match table.shape() {
        [k, d] if *k > 0 => (*k, *d),
        s => return Err(Error::Invalid(format!("empty or malformed codebook {s:?}"))),
    };
    let n = match z.shape() {
        [n, zd] if *zd == d => *n,
        s => return Err(Error::Layout(format!("latent {s:?} does not match code dim {d}"))),
    };
    let rows = table.data();
    let mut ids = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n * d);
    for zi in z.data().chunks(d) {
        let mut best = (f64::INFINITY, 0);
        for (j, c) in rows.chunks(d).enumerate() {
            let dist: f64 = zi.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.0 {
                best = (dist, j);
            }
        }
        ids.push(best.1);
        out.extend_from_slice(&rows[best.1 * d..(best.1 + 1) * d]);
    }
    debug_assert!(ids.iter().all(|&i| i < k));
    Ok((ids, Array::new(vec![n, d], out)?))
}

/// Level `v` quantizes `r_v = r_{v-1} - e_{v-1}` with `r_0 = z`. Returns the
/// tokens and the per-level selected embeddings.
pub fn residual_quantize(z: &Array, book: &Codebook<Array>) -> Result<(TokenSeq, Vec<Array>)> {
    if book.depth() == 0 {
        return Err(Error::Invalid("codebook has no levels".into()));
    }
    let mut residual = z.clone();
    let mut ids = Vec::with_capacity(book.depth());
    let mut embeddings = Vec::with_capacity(book.depth());
    for table in &book.levels {
        let (id, e) = quantize(&residual, table)?;
        for (r, x) in residual.data_mut().iter_mut().zip(e.data()) {
            *r -= x;
        }
        ids.push(id);
        embeddings.push(e);
    }
    Ok((TokenSeq::from_levels(&ids)?, embeddings))
}

/// `||sg(z) - e||^2 + beta ||z - sg(e)||^2`, summed over the last axis and
/// averaged over the remaining rows.
pub fn vq_loss(g: &mut Graph, z: Var, e: Var, beta: f64) -> Result<Var> {
    if g.shape(z) != g.shape(e) {
        return Err(Error::Layout(format!(
            "vq_loss shapes {:?} and {:?}",
            g.shape(z),
            g.shape(e)
        )));
    }
    let d = *g.shape(z).last().unwrap_or(&1) as f64;
    let zs = g.stop_gradient(z)?;
    let es = g.stop_gradient(e)?;
    let a = g.sub(zs, e)?;
    let a = g.square(a)?;
    let b = g.sub(z, es)?;
    let b = g.square(b)?;
    let b = g.scale(b, beta)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    Ok(g.scale(m, d)?)
}

/// Fraction of base-level codes used at least once.
pub fn codebook_usage(tokens: &[TokenSeq], codebook_size: usize) -> f64 {
    let mut used = vec![false; codebook_size];
    for t in tokens {
        for p in 0..t.len() {
            used[t.get(p, 0)] = true;
        }
    }
    used.iter().filter(|&&u| u).count() as f64 / codebook_size as f64
}

/// Mean squared raw-feature error of decode(quantize(encode(f))) using
/// the first `levels` residual levels.
pub fn reconstruction_mse(motions: &[&MotionFeatures], w: &TokenizerWeights, levels: usize) -> Result<f64> {
    let tokens = w.tokenize_all(motions)?;
    let mut book = w.codebook().clone();
    book.levels.truncate(levels.max(1));
    let mut total = 0.0;
    let mut count = 0usize;
    for (chunk, toks) in motions.chunks(64).zip(tokens.chunks(64)) {
        let t = toks[0].len();
        let d = book.dim();
        let mut data = Vec::with_capacity(toks.len() * t * d);
        for tk in toks {
            data.extend_from_slice(book.embed(tk)?.data());
        }
        let decoded = w.decode_batch(&Array::new(vec![toks.len(), t, d], data)?)?;
        for (m, r) in chunk.iter().zip(&decoded) {
            for (a, b) in m.array().data().iter().zip(r.array().data()) {
                total += (a - b) * (a - b);
            }
            count += m.array().len();
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean standardized reconstruction MSE per epoch.
    pub epoch_recon: Vec<f64>,
}

fn feature_statistics(data: &[&MotionFeatures], f: usize) -> (Array, Array) {
    let mut mean = vec![0.0; f];
    let mut sq = vec![0.0; f];
    let mut n = 0.0;
    for m in data {
        for row in m.array().data().chunks(f) {
            for k in 0..f {
                mean[k] += row[k];
                sq[k] += row[k] * row[k];
            }
            n += 1.0;
        }
    }
    let mean: Vec<f64> = mean.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
        .collect();
    (Array::from_vec(mean), Array::from_vec(std))
}

/// Seeds each level with encoder outputs (level 0) and residuals (later
/// levels) drawn from the data.
fn init_codebook_from_data(w: &mut TokenizerWeights, data: &[&MotionFeatures], rng: &mut Rng) -> Result<()> {
    let sample: Vec<&MotionFeatures> = data.iter().take(128).copied().collect();
    let z = w.encode_batch(&sample)?;
    let d = w.config.code_dim;
    let k = w.config.codebook_size;
    let t = z.shape()[1];
    let mut residual = z.reshape(&[sample.len() * t, d])?;
    let rows = residual.shape()[0];
    for v in 0..w.config.levels {
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(rng);
        let mut table = Vec::with_capacity(k * d);
        for i in 0..k {
            table.extend_from_slice(residual.row(order[i % rows]));
        }
        w.net.codebook.levels[v] = Array::new(vec![k, d], table)?;
        let (_, e) = quantize(&residual, &w.net.codebook.levels[v])?;
        for (r, x) in residual.data_mut().iter_mut().zip(e.data()) {
            *r -= x;
        }
    }
    Ok(())
}

/// Trains encoder, decoder, and codebook jointly on reconstruction MSE
/// plus the per-level VQ loss, with a straight-through copy at the
/// quantization boundary.
pub fn train_tokenizer(
    data: &[MotionFeatures],
    cfg: &TokenizerConfig,
    seed: u64,
) -> Result<(TokenizerWeights, TrainLog)> {
    let first = data
        .first()
        .ok_or_else(|| Error::Invalid("empty training set".into()))?;
    TokenizerWeights::check_frames(first.frames())?;
    let joints = first.joints();
    let refs: Vec<&MotionFeatures> = data.iter().collect();
    let mut w = TokenizerWeights::init(cfg, joints, seed);
    let (mean, std) = feature_statistics(&refs, w.feature_dim());
    w.mean = mean;
    w.std = std;
    let mut rng = substream(seed, crate::rng::stream::TOKENIZER_TRAIN);
    init_codebook_from_data(&mut w, &refs, &mut rng)?;

    let mut opt = AdamW::new(0.0, 1.0);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    let total = cfg.epochs * data.len().div_ceil(cfg.batch_size.max(1));
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut recon_sum, mut batches) = (0.0, 0.0, 0.0);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&MotionFeatures> = idx.iter().map(|&i| &data[i]).collect();
            let x = w.standardize(&batch)?;
            let (loss, recon, grads) = tokenizer_step(&w, x)?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    stage: "tokenizer",
                    step,
                    detail: format!("loss {loss} in epoch {epoch}"),
                });
            }
            opt.update(&mut w.net, &grads, warmup_cosine_lr(cfg.lr, cfg.warmup, step, total));
            loss_sum += loss;
            recon_sum += recon;
            batches += 1.0;
            step += 1;
        }
        log.epoch_loss.push(loss_sum / batches);
        log.epoch_recon.push(recon_sum / batches);
    }
    Ok((w, log))
}

fn tokenizer_step(w: &TokenizerWeights, x: Array) -> Result<(f64, f64, Vec<Array>)> {
    let mut g = Graph::new();
    let net = bind_params(&mut g, &w.net);
    let x = g.constant(x);
    let z = net.encoder.forward(&mut g, x)?;
    let zs = g.shape(z).to_vec();
    let (b, t, d) = (zs[0], zs[1], zs[2]);
    let mut r = g.reshape(z, &[b * t, d])?;
    let mut qsum = Array::zeros(&[b * t, d]);
    let mut vq = None;
    for (v, table) in w.net.codebook.levels.iter().enumerate() {
        let (ids, emb) = quantize(g.value(r), table)?;
        let e = g.gather(net.codebook.levels[v], &ids)?;
        let l = vq_loss(&mut g, r, e, w.config.beta)?;
        vq = Some(match vq {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
        let es = g.stop_gradient(e)?;
        r = g.sub(r, es)?;
        qsum.add_assign(&emb);
    }
    let q = g.straight_through(qsum.reshape(&[b, t, d])?, z)?;
    let y = net.decoder.forward(&mut g, q)?;
    let diff = g.sub(y, x)?;
    let sq = g.square(diff)?;
    let recon = g.mean(sq)?;
    let loss = g.add(recon, vq.expect("at least one level"))?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), g.value(recon).item(), collect_grads(&grads, &net)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_picks_nearest_and_breaks_ties_low() {
        let book = Array::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let z = Array::new(vec![2, 2], vec![0.2, 0.1, 0.5, 0.5]).unwrap();
        let (ids, e) = quantize(&z, &book).unwrap();
        assert_eq!(ids, vec![0, 0]);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0]);
        assert!(quantize(&z, &Array::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn vq_loss_arithmetic() {
        let mut g = Graph::new();
        let z = g.constant(Array::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let e = g.constant(Array::zeros(&[1, 2]));
        let l = vq_loss(&mut g, z, e, 0.25).unwrap();
        assert!((g.value(l).item() - 1.25).abs() < 1e-15);
    }

    #[test]
    fn token_seq_levels() {
        let s = TokenSeq::from_levels(&[vec![1, 2, 3], vec![4, 5, 6]]).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.get(1, 1), 5);
        assert_eq!(s.level(0), vec![1, 2, 3]);
    }
}
