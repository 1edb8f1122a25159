//! Iterative masked decoding with inference-time editing, and the
//! applications built on it: any-joint control, obstacle avoidance, and
//! body-part timelines.

use std::path::Path;

use diffcore::{Array, Graph, Var};
use serde::{Deserialize, Serialize};

use crate::config::{EditConfig, RunConfig};
use crate::editctl::{self, Obstacle};
use crate::error::{Error, Result};
use crate::kinematics::{joint_index, recover_global, recover_global_var, GlobalMotion, SpatialControl};
use crate::maskmodel::{
    cfg_logits, confidence_remask, mask_schedule, predict_logits, predict_residual, provisional_motion,
    spatial_features, BaseWeights, ControlWeights, MaskedTokens,
};
use crate::rng::{stream, substream};
use crate::tokenizer::{Codebook, DecoderVars, TokenSeq, TokenizerWeights, DOWNSAMPLE};

/// Trained weights used for generation.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub tokenizer: &'a TokenizerWeights,
    pub base: &'a BaseWeights,
    pub control: Option<&'a ControlWeights>,
}

impl Models<'_> {
    fn check(&self) -> Result<()> {
        let d = &self.base.dims;
        if self.tokenizer.joints != d.joints
            || self.tokenizer.config.codebook_size != d.codebook_size
            || self.tokenizer.config.code_dim != d.code_dim
        {
            return Err(Error::Config(
                "tokenizer and transformer checkpoints disagree on sizes".into(),
            ));
        }
        if let Some(c) = self.control {
            if c.dims != *d {
                return Err(Error::Config("control and base checkpoints disagree on sizes".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GenerationRequest {
    pub label: Option<usize>,
    pub frames: usize,
    pub spatial: Option<SpatialControl>,
    pub obstacles: Vec<Obstacle>,
    /// `T x J` selector of the points repelled from obstacles.
    pub obstacle_selector: Option<Array>,
    pub iterations: usize,
    pub temperature: f64,
    pub cfg_scale: f64,
    pub residual_cfg_scale: f64,
    pub edit: EditConfig,
    /// Feed the spatial signal through the control branch when available.
    pub use_control: bool,
    pub seed: u64,
    pub trace: bool,
}

impl GenerationRequest {
    pub fn new(cfg: &RunConfig, label: Option<usize>, seed: u64) -> Self {
        Self {
            label,
            frames: cfg.frames,
            spatial: None,
            obstacles: Vec::new(),
            obstacle_selector: None,
            iterations: cfg.schedule.iterations,
            temperature: cfg.schedule.temperature,
            cfg_scale: cfg.schedule.cfg_base,
            residual_cfg_scale: cfg.schedule.cfg_residual,
            edit: cfg.profiles.fast.clone(),
            use_control: true,
            seed,
            trace: false,
        }
    }

    fn has_edit_loss(&self) -> bool {
        self.spatial.as_ref().is_some_and(|s| s.active_count() > 0)
            || (!self.obstacles.is_empty() && self.edit.obstacle_weight != 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleReport {
    /// Minimum signed distance over selected points and obstacles.
    pub min_sdf: f64,
    /// Selected (frame, joint) points inside any obstacle.
    pub violations: usize,
}

#[derive(Clone, Debug)]
pub struct GenerationResult {
    pub motion: GlobalMotion,
    pub tokens: TokenSeq,
    /// Per iteration, the max probability of each token before editing.
    pub confidence_before: Vec<Vec<f64>>,
    /// Same after logit editing (equal to `before` without editing).
    pub confidence_after: Vec<Vec<f64>>,
    /// Logit-editing loss traces, one per iteration that edited.
    pub logit_traces: Vec<Vec<f64>>,
    pub code_trace: Vec<f64>,
    pub obstacle_report: Option<ObstacleReport>,
}

fn max_probs(logits: &Array, tau: f64) -> Result<(Array, Vec<f64>)> {
    let p = editctl::gumbel_softmax_array(logits, None, tau)?;
    let k = p.shape()[1];
    let m = p
        .data()
        .chunks(k)
        .map(|r| r.iter().copied().fold(0.0, f64::max))
        .collect();
    Ok((p, m))
}

/// Edit loss on decoded global positions `[T, J, 3]`.
fn edit_loss(g: &mut Graph, pos: Var, req: &GenerationRequest) -> Result<Var> {
    let mut loss = None;
    if let Some(s) = req.spatial.as_ref().filter(|s| s.active_count() > 0) {
        loss = Some(editctl::consistency_loss(g, pos, s)?);
    }
    if !req.obstacles.is_empty() && req.edit.obstacle_weight != 0.0 {
        let sel = req
            .obstacle_selector
            .as_ref()
            .ok_or_else(|| Error::Invalid("obstacles need a joint selector".into()))?;
        let o = editctl::obstacle_loss(g, pos, &req.obstacles, sel)?;
        let o = g.scale(o, req.edit.obstacle_weight)?;
        loss = Some(match loss {
            Some(l) => g.add(l, o)?,
            None => o,
        });
    }
    loss.ok_or_else(|| Error::Invalid("no edit loss terms".into()))
}

/// Embedding contribution of the residual levels predicted for `base_ids`.
fn residual_offset(
    base: &BaseWeights,
    book: &Codebook<Array>,
    base_ids: &[usize],
    req: &GenerationRequest,
) -> Result<Array> {
    let full = predict_residual(base, book, base_ids, req.label, req.residual_cfg_scale)?;
    let mut e = book.embed(&full)?;
    let d = book.dim();
    for (p, &id) in base_ids.iter().enumerate() {
        for (o, b) in e.data_mut()[p * d..(p + 1) * d]
            .iter_mut()
            .zip(&book.base().data()[id * d..(id + 1) * d])
        {
            *o -= b;
        }
    }
    Ok(e)
}

/// `[t, d]` embeddings to `[T, J, 3]` positions inside a graph.
fn positions(g: &mut Graph, dec: &DecoderVars, e: Var, joints: usize) -> Result<Var> {
    let s = g.shape(e).to_vec();
    let e = g.reshape(e, &[1, s[0], s[1]])?;
    let f = dec.decode(g, e)?;
    let p = recover_global_var(g, f, joints)?;
    let ps = g.shape(p).to_vec();
    Ok(g.reshape(p, &[ps[1], ps[2], 3])?)
}

/// One iteration's logit editing: gradient descent on `logits` (`t x K`)
/// through the Gumbel-softmax draw with fixed `noise`, straight-through
/// embeddings, and the decoder, using the step size and count of
/// `req.edit`. Unmasked positions of `x` stay fixed. Returns the edited
/// logits and the loss trace.
pub fn edit_logits(
    req: &GenerationRequest,
    models: &Models,
    logits: &Array,
    x: &MaskedTokens,
    noise: &Array,
) -> Result<(Array, Vec<f64>)> {
    let dims = &models.base.dims;
    let tok = models.tokenizer;
    let book = tok.codebook();
    if x.len() != logits.shape()[0] {
        return Err(Error::Invalid(format!(
            "{} tokens for {} logit rows",
            x.len(),
            logits.shape()[0]
        )));
    }
    let fixed: Vec<Option<usize>> = x.ids().iter().map(|&id| (id != dims.mask_id()).then_some(id)).collect();
    editctl::logit_edit(
        logits,
        |g, lv| {
            let probs = editctl::gumbel_softmax(g, lv, Some(noise), req.edit.temperature)?;
            let hard: Vec<usize> = editctl::hard_indices(g.value(probs))
                .into_iter()
                .zip(&fixed)
                .map(|(h, f)| f.unwrap_or(h))
                .collect();
            let table = g.constant(book.base().clone());
            let e = editctl::token_embeddings(g, probs, table, &fixed)?;
            let r = g.constant(residual_offset(models.base, book, &hard, req)?);
            let e = g.add(e, r)?;
            let dec = tok.bind_decoder(g);
            let p = positions(g, &dec, e, dims.joints)?;
            edit_loss(g, p, req)
        },
        req.edit.logit_lr,
        req.edit.logit_steps,
    )
}

/// Runs the full decoding loop of one request.
pub fn generate(req: &GenerationRequest, models: &Models) -> Result<GenerationResult> {
    models.check()?;
    let dims = &models.base.dims;
    let tok = models.tokenizer;
    if !req.frames.is_multiple_of(DOWNSAMPLE) || req.frames / DOWNSAMPLE > dims.tokens || req.frames == 0 {
        return Err(Error::Invalid(format!(
            "length {} must be a positive multiple of {DOWNSAMPLE} up to {}",
            req.frames,
            dims.tokens * DOWNSAMPLE
        )));
    }
    if req.iterations == 0 {
        return Err(Error::Invalid("at least one iteration required".into()));
    }
    req.edit.validate()?;
    if let Some(s) = &req.spatial {
        if s.frames() != req.frames || s.joints() != dims.joints {
            return Err(Error::Control(format!(
                "control covers {} frames x {} joints, request is {} x {}",
                s.frames(),
                s.joints(),
                req.frames,
                dims.joints
            )));
        }
    }
    let t = req.frames / DOWNSAMPLE;
    let k = dims.codebook_size;
    let book = tok.codebook();
    let mask_emb = editctl::mask_embedding(book)?;
    let mut gumbel = substream(req.seed, stream::GUMBEL);
    let editing = req.has_edit_loss();
    let spatial = req.spatial.as_ref().filter(|s| s.active_count() > 0);
    let control = models.control.filter(|_| req.use_control && spatial.is_some());

    let mut x = MaskedTokens::all_masked(t, dims.mask_id());
    let mut result = GenerationResult {
        motion: GlobalMotion::new(Array::zeros(&[1, 1, 3]))?,
        tokens: TokenSeq::new(vec![0], 1)?,
        confidence_before: Vec::new(),
        confidence_after: Vec::new(),
        logit_traces: Vec::new(),
        code_trace: Vec::new(),
        obstacle_report: None,
    };
    for i in 0..req.iterations {
        let pair = [&x, &x];
        let labels = [req.label, None];
        let raw = match (control, spatial) {
            (Some(c), Some(s)) => {
                let prov = provisional_motion(&[&x], tok, &mask_emb)?;
                let f = spatial_features(s, Some(&prov[0]))?;
                predict_logits(models.base, Some(c), &pair, &labels, Some(&[f.clone(), f]))?
            }
            _ => predict_logits(models.base, None, &pair, &labels, None)?,
        };
        let half = t * k;
        let cond = Array::new(vec![t, k], raw.data()[..half].to_vec())?;
        let uncond = Array::new(vec![t, k], raw.data()[half..].to_vec())?;
        let mut logits = cfg_logits(&cond, &uncond, req.cfg_scale)?;
        let noise = editctl::gumbel_noise(&[t, k], &mut gumbel);
        let (_, before) = max_probs(&logits, req.temperature)?;

        if editing && req.edit.logit_steps > 0 {
            let (edited, trace) = edit_logits(req, models, &logits, &x, &noise)?;
            logits = edited;
            if req.trace {
                result.logit_traces.push(trace);
            }
        }
        let (probs, after) = max_probs(&logits, req.temperature)?;
        if req.trace {
            result.confidence_before.push(before);
            result.confidence_after.push(after);
        }

        let drawn = editctl::hard_indices(&editctl::gumbel_softmax_array(&logits, Some(&noise), req.temperature)?);
        let sampled: Vec<usize> = (0..t)
            .map(|p| if x.is_masked(p) { drawn[p] } else { x.ids()[p] })
            .collect();
        let frozen: Vec<bool> = (0..t).map(|p| !x.is_masked(p)).collect();
        let keep = if i + 1 < req.iterations {
            let n = (mask_schedule(i + 1, req.iterations)? * t as f64).round() as usize;
            n.clamp(1, x.masked_count())
        } else {
            0
        };
        x = confidence_remask(&probs, &sampled, keep, &frozen, dims.mask_id())?;
    }

    let base_ids = x.unmasked_ids()?;
    let tokens = predict_residual(models.base, book, &base_ids, req.label, req.residual_cfg_scale)?;
    let mut e = book.embed(&tokens)?;
    if editing && req.edit.code_steps > 0 {
        let (edited, trace) = editctl::codebook_edit(
            &e,
            |g, ev| {
                let dec = tok.bind_decoder(g);
                let p = positions(g, &dec, ev, dims.joints)?;
                edit_loss(g, p, req)
            },
            req.edit.code_lr,
            req.edit.code_steps,
        )?;
        e = edited;
        result.code_trace = trace;
    }
    let features = tok.decode_batch(&e.reshape(&[1, t, dims.code_dim])?)?.remove(0);
    let motion = recover_global(&features)?;
    if !req.obstacles.is_empty() {
        if let Some(sel) = &req.obstacle_selector {
            result.obstacle_report = Some(obstacle_report(&motion, &req.obstacles, sel));
        }
    }
    result.motion = motion;
    result.tokens = tokens;
    Ok(result)
}

/// Minimum SDF and number of penetrating selected points.
pub fn obstacle_report(motion: &GlobalMotion, obstacles: &[Obstacle], selector: &Array) -> ObstacleReport {
    let j = motion.joints();
    let mut min_sdf = f64::INFINITY;
    let mut violations = 0;
    for n in 0..motion.frames() {
        for jj in 0..j {
            if selector.data()[n * j + jj] == 0.0 {
                continue;
            }
            let p = motion.at(n, jj);
            let sdf = obstacles
                .iter()
                .map(|o| editctl::sdf_sphere(p, o.center(n), o.radius))
                .fold(f64::INFINITY, f64::min);
            min_sdf = min_sdf.min(sdf);
            if sdf < 0.0 {
                violations += 1;
            }
        }
    }
    ObstacleReport { min_sdf, violations }
}

/// One named target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlEntry {
    pub joint: String,
    pub frame: usize,
    pub target: [f64; 3],
}

/// Builds a control signal from named (joint, frame, target) entries.
pub fn control_any(entries: &[ControlEntry], frames: usize, joints: usize) -> Result<SpatialControl> {
    if entries.is_empty() {
        return Err(Error::Control("no control entries".into()));
    }
    let mut s = SpatialControl::empty(frames, joints);
    for (i, e) in entries.iter().enumerate() {
        let j = joint_index(&e.joint)
            .filter(|&j| j < joints)
            .ok_or_else(|| Error::Control(format!("entry {i}: unknown joint '{}'", e.joint)))?;
        if e.frame >= frames {
            return Err(Error::Control(format!(
                "entry {i}: frame {} outside 0..{frames}",
                e.frame
            )));
        }
        if e.target.iter().any(|v| !v.is_finite()) {
            return Err(Error::Control(format!("entry {i}: non-finite target")));
        }
        if s.is_active(e.frame, j) && s.target(e.frame, j) != e.target {
            return Err(Error::Control(format!(
                "entry {i}: conflicting targets for {} at frame {}",
                e.joint, e.frame
            )));
        }
        s.set(e.frame, j, e.target);
    }
    Ok(s)
}

/// Reads control entries from a JSON array file.
pub fn read_control_file(path: impl AsRef<Path>, frames: usize, joints: usize) -> Result<SpatialControl> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ControlEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Control(format!("{}: {e}", path.display())))?;
    control_any(&entries, frames, joints)
}

/// Pelvis targets tracing a zigzag: forward along `+z` at `step` per frame
/// while `x` follows a triangle wave of the given amplitude and period,
/// sampled every `every` frames.
pub fn zigzag_entries(
    frames: usize,
    every: usize,
    step: f64,
    amplitude: f64,
    period: f64,
    height: f64,
) -> Vec<ControlEntry> {
    (0..frames)
        .step_by(every.max(1))
        .map(|n| {
            let phase = n as f64 / period;
            let tri = 1.0 - 4.0 * (phase - (phase + 0.5).floor()).abs();
            ControlEntry {
                joint: "pelvis".into(),
                frame: n,
                target: [amplitude * tri, height, step * n as f64],
            }
        })
        .collect()
}

/// One body-part prompt over a frame window `[start, end)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimelinePrompt {
    pub label: usize,
    pub joints: Vec<String>,
    pub start: usize,
    pub end: usize,
}

/// Sequential body-part generation: a full-body pass from `base_label`,
/// then one regeneration per prompt with every other joint (all frames)
/// and the prompt's own joints outside its window held to the current
/// result. Later prompts win on overlaps.
pub fn timeline(
    prompts: &[TimelinePrompt],
    base_label: usize,
    req: &GenerationRequest,
    models: &Models,
) -> Result<GenerationResult> {
    let mut first = req.clone();
    first.label = Some(base_label);
    let mut current = generate(&first, models)?;
    let joints = models.base.dims.joints;
    for (k, p) in prompts.iter().enumerate() {
        if p.start >= p.end || p.end > req.frames {
            return Err(Error::Control(format!(
                "prompt {k}: window [{}, {}) invalid",
                p.start, p.end
            )));
        }
        if p.joints.is_empty() {
            return Err(Error::Control(format!("prompt {k}: empty body-part set")));
        }
        let mut part = vec![false; joints];
        for name in &p.joints {
            let j = joint_index(name)
                .filter(|&j| j < joints)
                .ok_or_else(|| Error::Control(format!("prompt {k}: unknown joint '{name}'")))?;
            part[j] = true;
        }
        let mut s = SpatialControl::empty(req.frames, joints);
        for n in 0..req.frames {
            for (j, &inside) in part.iter().enumerate() {
                if !inside || n < p.start || n >= p.end {
                    s.set(n, j, current.motion.at(n, j));
                }
            }
        }
        let mut next = req.clone();
        next.label = Some(p.label);
        next.seed = req.seed.wrapping_add(k as u64 + 1);
        next.spatial = (s.active_count() > 0).then_some(s);
        current = generate(&next, models)?;
    }
    Ok(current)
}

/// Writes confidence traces as CSV: one row per iteration, one column per
/// token. Returns an error when tracing was off.
pub fn write_confidence_trace(
    result: &GenerationResult,
    before: impl AsRef<Path>,
    after: impl AsRef<Path>,
) -> Result<()> {
    if result.confidence_before.is_empty() {
        return Err(Error::Invalid("generation ran without tracing".into()));
    }
    for (path, rows) in [
        (before.as_ref(), &result.confidence_before),
        (after.as_ref(), &result.confidence_after),
    ] {
        let mut w = csv::Writer::from_path(path)?;
        let t = rows[0].len();
        let mut header = vec!["iteration".to_string()];
        header.extend((0..t).map(|p| format!("token_{p}")));
        w.write_record(&header)?;
        for (i, r) in rows.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(r.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
