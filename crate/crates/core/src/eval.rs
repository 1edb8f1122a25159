//! Control metrics and evaluation protocols.

use std::path::Path;

use diffcore::Graph;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{EditConfig, RunConfig};
use crate::error::{Error, Result};
use crate::kinematics::{
    extract_features, joint_index, GlobalMotion, SpatialControl, SyntheticSample, JOINT_NAMES, LEFT_FOOT, NUM_CLASSES,
    PELVIS, RIGHT_FOOT,
};
use crate::maskmodel::{corrupt, forward_base, masked_nll, BaseWeights};
use crate::pipeline::{generate, GenerationRequest, Models};
use crate::rng::{stream, substream, Rng};
use crate::tokenizer::TokenizerWeights;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeErrors {
    pub traj_err: f64,
    pub loc_err: f64,
    pub avg_err: f64,
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Errors of one motion against its control: `traj_err` is 1 when any
/// controlled entry misses by more than `threshold`, `loc_err` the fraction
/// that do, `avg_err` the mean distance.
pub fn keyframe_errors(gen: &GlobalMotion, s: &SpatialControl, threshold: f64) -> Result<KeyframeErrors> {
    if gen.frames() != s.frames() || gen.joints() != s.joints() {
        return Err(Error::Control("motion and control shapes differ".into()));
    }
    let entries = s.active_entries();
    if entries.is_empty() {
        return Err(Error::Control("control has no active entries".into()));
    }
    let d: Vec<f64> = entries
        .iter()
        .map(|&(n, j)| dist(gen.at(n, j), s.target(n, j)))
        .collect();
    let over = d.iter().filter(|&&x| x > threshold).count();
    Ok(KeyframeErrors {
        traj_err: if over > 0 { 1.0 } else { 0.0 },
        loc_err: over as f64 / d.len() as f64,
        avg_err: d.iter().sum::<f64>() / d.len() as f64,
    })
}

/// Fraction of frame transitions in which a foot below `height_eps` slides
/// more than `slide_eps` in the ground plane.
pub fn foot_skate(gen: &GlobalMotion, height_eps: f64, slide_eps: f64) -> f64 {
    let t = gen.frames();
    if t < 2 {
        return 0.0;
    }
    let feet = [LEFT_FOOT, RIGHT_FOOT];
    let skating = (1..t)
        .filter(|&n| {
            feet.iter().any(|&f| {
                let (a, b) = (gen.at(n - 1, f), gen.at(n, f));
                let grounded = a[1].max(b[1]) < height_eps;
                grounded && ((b[0] - a[0]).powi(2) + (b[2] - a[2]).powi(2)).sqrt() > slide_eps
            })
        })
        .count();
    skating as f64 / (t - 1) as f64
}

/// Mean distance between two motions over frames and joints.
pub fn motion_distance(a: &GlobalMotion, b: &GlobalMotion) -> f64 {
    let (t, j) = (a.frames(), a.joints());
    let mut sum = 0.0;
    for n in 0..t {
        for jj in 0..j {
            sum += dist(a.at(n, jj), b.at(n, jj));
        }
    }
    sum / (t * j) as f64
}

/// Mean [`motion_distance`] over `pairs` random distinct pairs.
pub fn diversity_proxy(samples: &[GlobalMotion], pairs: usize, seed: u64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Invalid("diversity needs at least 2 samples".into()));
    }
    if pairs == 0 {
        return Err(Error::Invalid("diversity needs at least 1 pair".into()));
    }
    let mut rng = substream(seed, stream::EVAL_PAIRS);
    let n = samples.len();
    let mut sum = 0.0;
    for _ in 0..pairs {
        let a = rng.gen_range(0..n);
        let mut b = rng.gen_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        sum += motion_distance(&samples[a], &samples[b]);
    }
    Ok(sum / pairs as f64)
}

/// Joint order used to enumerate cross combinations.
pub const CROSS_ORDER: [&str; 6] = ["pelvis", "left_foot", "right_foot", "head", "left_wrist", "right_wrist"];

/// Lower-body joints held to ground truth in the upper-body protocol.
pub const LOWER_BODY: [usize; 3] = [PELVIS, LEFT_FOOT, RIGHT_FOOT];

/// Every non-empty subset of [`CROSS_ORDER`] as skeleton joint indices,
/// ordered by size and then lexicographically by position in that order.
pub fn cross_combinations() -> Vec<Vec<usize>> {
    let order: Vec<usize> = CROSS_ORDER
        .iter()
        .map(|n| joint_index(n).expect("known joint"))
        .collect();
    let mut sets: Vec<Vec<usize>> = (1u32..64)
        .map(|m| (0..6).filter(|b| m & (1 << b) != 0).collect::<Vec<usize>>())
        .collect();
    sets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    sets.into_iter()
        .map(|s| s.into_iter().map(|p| order[p]).collect())
        .collect()
}

/// Keyframe counts of the density sweep: 1, 2, 5, a quarter of the
/// frames, and every frame.
pub fn density_levels(frames: usize) -> Vec<usize> {
    vec![1, 2, 5, frames / 4, frames]
}

/// Control on `joints` at `count` random distinct frames of `gt`.
pub fn keyframe_control(gt: &GlobalMotion, joints: &[usize], count: usize, rng: &mut Rng) -> Result<SpatialControl> {
    let t = gt.frames();
    if count == 0 || count > t {
        return Err(Error::Invalid(format!("keyframe count {count} outside 1..={t}")));
    }
    if joints.is_empty() || joints.iter().any(|&j| j >= gt.joints()) {
        return Err(Error::Invalid("invalid joint set".into()));
    }
    let mut frames: Vec<usize> = (0..t).collect();
    frames.shuffle(rng);
    let mut s = SpatialControl::empty(t, gt.joints());
    for &n in &frames[..count] {
        for &j in joints {
            s.set(n, j, gt.at(n, j));
        }
    }
    Ok(s)
}

/// `count` random distinct (frame, joint) entries of `gt` over all joints.
pub fn random_entries(gt: &GlobalMotion, count: usize, rng: &mut Rng) -> Result<SpatialControl> {
    let (t, j) = (gt.frames(), gt.joints());
    if count == 0 || count > t * j {
        return Err(Error::Invalid(format!("entry count {count} outside 1..={}", t * j)));
    }
    let mut s = SpatialControl::empty(t, j);
    while s.active_count() < count {
        let (n, jj) = (rng.gen_range(0..t), rng.gen_range(0..j));
        s.set(n, jj, gt.at(n, jj));
    }
    Ok(s)
}

/// Aggregated metrics of one protocol row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub joints: Vec<String>,
    /// Controlled keyframes per joint, or controlled entries when the
    /// joint set is empty.
    pub density: usize,
    pub samples: usize,
    pub traj_err: f64,
    pub loc_err: f64,
    pub avg_err: f64,
    pub foot_skate: f64,
    pub diversity: f64,
}

/// Generation settings shared by every row of a protocol.
#[derive(Clone, Debug)]
pub struct Protocol {
    pub edit: EditConfig,
    pub use_control: bool,
}

/// A trained model set with the configuration and held-out data it is
/// evaluated on.
pub struct Evaluator<'a> {
    pub cfg: &'a RunConfig,
    pub models: Models<'a>,
    pub heldout: &'a [SyntheticSample],
}

impl Evaluator<'_> {
    fn sample(&self, k: usize) -> Result<&SyntheticSample> {
        if self.heldout.is_empty() {
            return Err(Error::Invalid("no held-out samples".into()));
        }
        Ok(&self.heldout[k % self.heldout.len()])
    }

    fn generation_seed(&self, k: usize) -> u64 {
        self.cfg.seed.wrapping_add(1000 + k as u64)
    }

    /// Generates one motion per control (held-out sample `k` for control
    /// `k`) and aggregates the errors.
    pub fn run_row(
        &self,
        name: &str,
        joints: &[usize],
        density: usize,
        controls: &[SpatialControl],
        p: &Protocol,
    ) -> Result<MetricReport> {
        if controls.is_empty() {
            return Err(Error::Invalid("no controls to evaluate".into()));
        }
        let e = &self.cfg.eval;
        let mut motions = Vec::with_capacity(controls.len());
        let (mut traj, mut loc, mut avg, mut skate) = (0.0, 0.0, 0.0, 0.0);
        for (k, s) in controls.iter().enumerate() {
            let mut req = GenerationRequest::new(self.cfg, Some(self.sample(k)?.label), self.generation_seed(k));
            req.spatial = Some(s.clone());
            req.edit = p.edit.clone();
            req.use_control = p.use_control;
            let r = generate(&req, &self.models)?;
            let err = keyframe_errors(&r.motion, s, e.threshold)?;
            traj += err.traj_err;
            loc += err.loc_err;
            avg += err.avg_err;
            skate += foot_skate(&r.motion, e.height_eps, e.slide_eps);
            motions.push(r.motion);
        }
        let n = controls.len() as f64;
        let diversity = if motions.len() >= 2 {
            diversity_proxy(&motions, e.diversity_pairs, self.cfg.seed)?
        } else {
            0.0
        };
        Ok(MetricReport {
            name: name.to_string(),
            joints: joints.iter().map(|&j| JOINT_NAMES[j].to_string()).collect(),
            density,
            samples: controls.len(),
            traj_err: traj / n,
            loc_err: loc / n,
            avg_err: avg / n,
            foot_skate: skate / n,
            diversity,
        })
    }

    fn keyframe_rng(&self, suite: &str) -> Rng {
        substream(self.cfg.seed, &format!("{}/{suite}", stream::EVAL_KEYFRAMES))
    }

    /// One row per density level, controlling `joint` with ground truth.
    pub fn density_sweep(&self, joint: usize, levels: &[usize], p: &Protocol) -> Result<Vec<MetricReport>> {
        let mut rng = self.keyframe_rng("density");
        let mut rows = Vec::with_capacity(levels.len());
        for &level in levels {
            if level > self.cfg.frames {
                return Err(Error::Invalid(format!(
                    "density {level} exceeds {} frames",
                    self.cfg.frames
                )));
            }
            let controls = (0..self.cfg.eval.samples)
                .map(|k| keyframe_control(&self.sample(k)?.global, &[joint], level, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            rows.push(self.run_row(&format!("density_{level}"), &[joint], level, &controls, p)?);
        }
        Ok(rows)
    }

    /// One row per joint combination, each at the configured keyframe count.
    pub fn cross(&self, p: &Protocol) -> Result<Vec<MetricReport>> {
        let mut rng = self.keyframe_rng("cross");
        let count = self.cfg.eval.keyframes;
        cross_combinations()
            .iter()
            .enumerate()
            .map(|(i, set)| {
                let controls = (0..self.cfg.eval.samples)
                    .map(|k| keyframe_control(&self.sample(k)?.global, set, count, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                self.run_row(&format!("cross_{}", i + 1), set, count, &controls, p)
            })
            .collect()
    }

    /// Lower body held to ground truth on every frame; at least 20
    /// generations.
    pub fn upper_body(&self, p: &Protocol) -> Result<MetricReport> {
        let n = self.cfg.eval.samples.max(20);
        let t = self.cfg.frames;
        let controls = (0..n)
            .map(|k| {
                let gt = &self.sample(k)?.global;
                let mut s = SpatialControl::empty(t, gt.joints());
                for f in 0..t {
                    for &j in &LOWER_BODY {
                        s.set(f, j, gt.at(f, j));
                    }
                }
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        self.run_row("upper_body", &LOWER_BODY, t, &controls, p)
    }

    /// Every combination of logit editing, codebook editing, and the
    /// control branch, in the order (none), (logit), (code), (logit, code),
    /// then the same four with the control branch. Step sizes and counts
    /// come from `edit`; a disabled component gets zero steps.
    pub fn components(&self, edit: &EditConfig) -> Result<Vec<MetricReport>> {
        let mut rng = self.keyframe_rng("components");
        let controls = (0..self.cfg.eval.samples)
            .map(|k| random_entries(&self.sample(k)?.global, self.cfg.eval.keyframes, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        component_grid()
            .into_iter()
            .enumerate()
            .map(|(i, (logit, code, control))| {
                let p = Protocol {
                    edit: EditConfig {
                        logit_steps: if logit { edit.logit_steps } else { 0 },
                        code_steps: if code { edit.code_steps } else { 0 },
                        ..edit.clone()
                    },
                    use_control: control,
                };
                let name = format!(
                    "#{} logit={} code={} control={}",
                    i + 1,
                    logit as u8,
                    code as u8,
                    control as u8
                );
                self.run_row(&name, &[], self.cfg.eval.keyframes, &controls, &p)
            })
            .collect()
    }
}

/// Toggles (logit, code, control) of the component suite in row order.
pub fn component_grid() -> Vec<(bool, bool, bool)> {
    (0..8).map(|i| (i & 1 != 0, i & 2 != 0, i & 4 != 0)).collect()
}

/// Mean masked NLL of the base level over `samples` at mask ratio `ratio`.
pub fn heldout_nll(
    base: &BaseWeights,
    tokenizer: &TokenizerWeights,
    samples: &[SyntheticSample],
    ratio: f64,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples".into()));
    }
    let feats: Vec<_> = samples.iter().map(|s| &s.features).collect();
    let tokens = tokenizer.tokenize_all(&feats)?;
    let mut rng = substream(seed, stream::MASKING);
    let mut total = 0.0;
    for (s, t) in samples.iter().zip(&tokens) {
        let ids = t.level(0);
        let x = corrupt(&ids, ratio, base.dims.mask_id(), &mut rng)?;
        let logits = forward_base(&x, Some(s.label), base)?;
        let mut g = Graph::new();
        let l = g.constant(logits);
        let v = masked_nll(&mut g, l, &ids, &x.masked_positions())?;
        total += g.value(v).item();
    }
    Ok(total / samples.len() as f64)
}

/// Nearest-centroid label classifier over standardized per-channel
/// feature means and standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClassifier {
    mean: Vec<f64>,
    std: Vec<f64>,
    centroids: Vec<Vec<f64>>,
}

fn summary(m: &GlobalMotion) -> Result<Vec<f64>> {
    let f = extract_features(m)?;
    let a = f.array();
    let (t, c) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; 2 * c];
    for ch in 0..c {
        let col: Vec<f64> = (0..t).map(|n| a.data()[n * c + ch]).collect();
        let mu = col.iter().sum::<f64>() / t as f64;
        let var = col.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / t as f64;
        out[ch] = mu;
        out[c + ch] = var.sqrt();
    }
    Ok(out)
}

impl MotionClassifier {
    pub fn train(samples: &[SyntheticSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("no training samples".into()));
        }
        let xs = samples.iter().map(|s| summary(&s.global)).collect::<Result<Vec<_>>>()?;
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..d).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..d)
            .map(|i| {
                (xs.iter().map(|x| (x[i] - mean[i]).powi(2)).sum::<f64>() / n)
                    .sqrt()
                    .max(1e-6)
            })
            .collect();
        let mut centroids = vec![vec![0.0; d]; NUM_CLASSES];
        let mut counts = vec![0.0; NUM_CLASSES];
        for (x, s) in xs.iter().zip(samples) {
            counts[s.label] += 1.0;
            for i in 0..d {
                centroids[s.label][i] += (x[i] - mean[i]) / std[i];
            }
        }
        for (c, &k) in centroids.iter_mut().zip(&counts) {
            if k > 0.0 {
                c.iter_mut().for_each(|v| *v /= k);
            } else {
                c.fill(f64::INFINITY);
            }
        }
        Ok(Self { mean, std, centroids })
    }

    pub fn predict(&self, m: &GlobalMotion) -> Result<usize> {
        let x = summary(m)?;
        let z: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        let d2 = |c: &Vec<f64>| c.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        Ok((0..self.centroids.len())
            .min_by(|&a, &b| d2(&self.centroids[a]).total_cmp(&d2(&self.centroids[b])))
            .expect("at least one class"))
    }

    pub fn accuracy(&self, motions: &[(GlobalMotion, usize)]) -> Result<f64> {
        if motions.is_empty() {
            return Err(Error::Invalid("no motions".into()));
        }
        let hits = motions
            .iter()
            .map(|(m, l)| Ok((self.predict(m)? == *l) as usize))
            .sum::<Result<usize>>()?;
        Ok(hits as f64 / motions.len() as f64)
    }
}

/// Quality proxies of unconstrained generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub heldout_nll: f64,
    /// Classifier accuracy on held-out ground truth.
    pub classifier_real: f64,
    /// Classifier accuracy on generated motions against their labels.
    pub classifier_generated: f64,
    pub foot_skate: f64,
    /// Foot skating of the held-out ground truth.
    pub foot_skate_real: f64,
    pub diversity: f64,
    pub samples: usize,
}

pub fn quality(ev: &Evaluator, train: &[SyntheticSample]) -> Result<QualityReport> {
    let cfg = ev.cfg;
    let clf = MotionClassifier::train(train)?;
    let real: Vec<(GlobalMotion, usize)> = ev.heldout.iter().map(|s| (s.global.clone(), s.label)).collect();
    let mut gen = Vec::new();
    for k in 0..cfg.eval.samples.max(2) {
        let label = k % NUM_CLASSES;
        let req = GenerationRequest::new(cfg, Some(label), ev.generation_seed(k));
        gen.push((generate(&req, &ev.models)?.motion, label));
    }
    let motions: Vec<GlobalMotion> = gen.iter().map(|(m, _)| m.clone()).collect();
    let skate = motions
        .iter()
        .map(|m| foot_skate(m, cfg.eval.height_eps, cfg.eval.slide_eps))
        .sum::<f64>()
        / motions.len() as f64;
    let skate_real = real
        .iter()
        .map(|(m, _)| foot_skate(m, cfg.eval.height_eps, cfg.eval.slide_eps))
        .sum::<f64>()
        / real.len().max(1) as f64;
    Ok(QualityReport {
        heldout_nll: heldout_nll(ev.models.base, ev.models.tokenizer, ev.heldout, 0.5, cfg.seed)?,
        classifier_real: clf.accuracy(&real)?,
        classifier_generated: clf.accuracy(&gen)?,
        foot_skate: skate,
        foot_skate_real: skate_real,
        diversity: diversity_proxy(&motions, cfg.eval.diversity_pairs, cfg.seed)?,
        samples: gen.len(),
    })
}

#[derive(Serialize)]
struct ReportFile<'a, T: Serialize> {
    suite: &'a str,
    config_hash: String,
    rows: &'a [T],
}

/// Writes `dir/suite.json` and `dir/suite.csv`.
pub fn write_reports(dir: impl AsRef<Path>, suite: &str, cfg: &RunConfig, rows: &[MetricReport]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(format!("{suite}.json"));
    let file = ReportFile {
        suite,
        config_hash: cfg.hash(),
        rows,
    };
    std::fs::write(&json, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&json, e))?;
    let path = dir.join(format!("{suite}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "row",
        "joints",
        "density",
        "samples",
        "Traj. Err.",
        "Loc. Err.",
        "Avg. Err.",
        "Foot Skating",
        "Diversity",
        "config_hash",
    ])?;
    let hash = cfg.hash();
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.joints.join("+"),
            r.density.to_string(),
            r.samples.to_string(),
            format!("{:.6}", r.traj_err),
            format!("{:.6}", r.loc_err),
            format!("{:.6}", r.avg_err),
            format!("{:.6}", r.foot_skate),
            format!("{:.6}", r.diversity),
            hash.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn write_quality(dir: impl AsRef<Path>, cfg: &RunConfig, q: &QualityReport) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("quality.json");
    let file = ReportFile {
        suite: "quality",
        config_hash: cfg.hash(),
        rows: std::slice::from_ref(q),
    };
    std::fs::write(&path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&path, e))
}
