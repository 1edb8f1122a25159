//! Motion representation, global position recovery, and the procedural
//! synthetic motion set.
//!
//! Per-frame features (`F = 4 + 3(J-1)`):
//!
//! | channel      | meaning                                              |
//! |--------------|------------------------------------------------------|
//! | 0            | root yaw angular velocity (rad/frame)                |
//! | 1, 2         | root planar velocity (x, z) in the root-local frame  |
//! | 3            | root height                                          |
//! | 4 + 3(j-1).. | joint `j` offset (x, y, z) from the root, root-local |
//!
//! Heading `θ = 0` faces `+z`; a local vector `(x, z)` maps to world
//! `(x cos θ + z sin θ, -x sin θ + z cos θ)`. The heading of a frame is
//! the running sum of yaw velocities *including* that frame, and the root
//! position is the running sum of the rotated planar velocities, so frame
//! 0 encodes the absolute starting heading and offset from the origin.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use diffcore::{Array, Graph, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const JOINT_NAMES: [&str; 6] = ["pelvis", "head", "left_wrist", "right_wrist", "left_foot", "right_foot"];

pub const PELVIS: usize = 0;
pub const HEAD: usize = 1;
pub const LEFT_WRIST: usize = 2;
pub const RIGHT_WRIST: usize = 3;
pub const LEFT_FOOT: usize = 4;
pub const RIGHT_FOOT: usize = 5;

pub const NUM_CLASSES: usize = 8;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "walk-straight",
    "walk-circle-ccw",
    "walk-circle-cw",
    "zigzag",
    "wave-hand-stand",
    "walk-and-wave",
    "stand-still",
    "side-step",
];

pub fn feature_dim(joints: usize) -> usize {
    4 + 3 * (joints - 1)
}

/// Index of a joint in the default skeleton, accepting spaces or
/// underscores ("left foot" and "left_foot" both resolve).
pub fn joint_index(name: &str) -> Option<usize> {
    let norm = name.trim().replace(' ', "_").to_ascii_lowercase();
    JOINT_NAMES.iter().position(|&n| n == norm)
}

/// `T x F` local features.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFeatures {
    data: Array,
    joints: usize,
}

impl MotionFeatures {
    pub fn new(data: Array, joints: usize) -> Result<Self> {
        if joints < 2 {
            return Err(Error::Layout(format!("need at least 2 joints, got {joints}")));
        }
        let f = feature_dim(joints);
        match data.shape() {
            [_, w] if *w == f => {}
            s => {
                return Err(Error::Layout(format!(
                    "features of shape {s:?} do not match {joints} joints (F = {f})"
                )))
            }
        }
        if !data.is_finite() {
            return Err(Error::Layout("non-finite feature value".into()));
        }
        Ok(Self { data, joints })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn array(&self) -> &Array {
        &self.data
    }

    pub fn into_array(self) -> Array {
        self.data
    }

    pub fn truncate(&self, frames: usize) -> Result<Self> {
        let f = feature_dim(self.joints);
        let data = Array::new(vec![frames, f], self.data.data()[..frames * f].to_vec())?;
        Self::new(data, self.joints)
    }
}

/// `T x J x 3` absolute joint positions; joint 0 is the root.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalMotion {
    positions: Array,
}

impl GlobalMotion {
    pub fn new(positions: Array) -> Result<Self> {
        match positions.shape() {
            [t, j, 3] if *t >= 1 && *j >= 1 => {}
            s => return Err(Error::Layout(format!("global motion must be T x J x 3, got {s:?}"))),
        }
        if !positions.is_finite() {
            return Err(Error::Layout("non-finite joint position".into()));
        }
        Ok(Self { positions })
    }

    pub fn frames(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn array(&self) -> &Array {
        &self.positions
    }

    pub fn at(&self, frame: usize, joint: usize) -> [f64; 3] {
        let j = self.joints();
        let o = (frame * j + joint) * 3;
        let d = self.positions.data();
        [d[o], d[o + 1], d[o + 2]]
    }

    /// Frame-major nested vectors, as stored in motion files.
    pub fn to_nested(&self) -> Vec<Vec<[f64; 3]>> {
        (0..self.frames())
            .map(|f| (0..self.joints()).map(|j| self.at(f, j)).collect())
            .collect()
    }

    pub fn from_nested(frames: &[Vec<[f64; 3]>]) -> Result<Self> {
        let t = frames.len();
        let j = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != j) {
            return Err(Error::Layout("ragged joint lists".into()));
        }
        let data = frames.iter().flatten().flat_map(|p| p.iter().copied()).collect();
        Self::new(Array::new(vec![t, j, 3], data)?)
    }
}

/// Target positions `S` with a binary mask `σ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialControl {
    targets: Array,
    mask: Array,
}

impl SpatialControl {
    /// Zeroes any target entry whose mask is 0.
    pub fn new(targets: Array, mask: Array) -> Result<Self> {
        let (t, j) = match targets.shape() {
            [t, j, 3] => (*t, *j),
            s => return Err(Error::Control(format!("targets must be T x J x 3, got {s:?}"))),
        };
        if mask.shape() != [t, j] {
            return Err(Error::Control(format!(
                "mask shape {:?} does not match targets {:?}",
                mask.shape(),
                targets.shape()
            )));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Control("mask must be binary".into()));
        }
        if !targets.is_finite() {
            return Err(Error::Control("non-finite target".into()));
        }
        let mut targets = targets;
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 0.0 {
                targets.data_mut()[i * 3..i * 3 + 3].fill(0.0);
            }
        }
        Ok(Self { targets, mask })
    }

    pub fn empty(frames: usize, joints: usize) -> Self {
        Self {
            targets: Array::zeros(&[frames, joints, 3]),
            mask: Array::zeros(&[frames, joints]),
        }
    }

    pub fn frames(&self) -> usize {
        self.targets.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.targets.shape()[1]
    }

    pub fn targets(&self) -> &Array {
        &self.targets
    }

    pub fn mask(&self) -> &Array {
        &self.mask
    }

    pub fn is_active(&self, frame: usize, joint: usize) -> bool {
        self.mask.data()[frame * self.joints() + joint] != 0.0
    }

    pub fn active_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }

    /// Controlled `(frame, joint)` pairs in row-major order.
    pub fn active_entries(&self) -> Vec<(usize, usize)> {
        let j = self.joints();
        self.mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0.0)
            .map(|(i, _)| (i / j, i % j))
            .collect()
    }

    pub fn target(&self, frame: usize, joint: usize) -> [f64; 3] {
        let o = (frame * self.joints() + joint) * 3;
        let d = self.targets.data();
        [d[o], d[o + 1], d[o + 2]]
    }

    pub fn set(&mut self, frame: usize, joint: usize, target: [f64; 3]) {
        let i = frame * self.joints() + joint;
        self.targets.data_mut()[i * 3..i * 3 + 3].copy_from_slice(&target);
        self.mask.data_mut()[i] = 1.0;
    }
}

/// Differentiable recovery of global positions.
///
/// `features` is `[B, T, F]`; the result is `[B, T, J, 3]`.
pub fn recover_global_var(g: &mut Graph, features: Var, joints: usize) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    let f = feature_dim(joints);
    let (b, t) = match shape.as_slice() {
        [b, t, w] if *w == f => (*b, *t),
        _ => {
            return Err(Error::Layout(format!(
                "features of shape {shape:?} do not match {joints} joints (F = {f})"
            )))
        }
    };
    let yaw_vel = g.slice(features, 2, 0, 1)?;
    let heading = g.cumsum(yaw_vel, 1)?;
    let cos = g.cos(heading)?;
    let sin = g.sin(heading)?;
    let vx = g.slice(features, 2, 1, 1)?;
    let vz = g.slice(features, 2, 2, 1)?;
    let root_y = g.slice(features, 2, 3, 1)?;

    // world = (x cos + z sin, -x sin + z cos)
    let a = g.mul(cos, vx)?;
    let c = g.mul(sin, vz)?;
    let wvx = g.add(a, c)?;
    let a = g.mul(cos, vz)?;
    let c = g.mul(sin, vx)?;
    let wvz = g.sub(a, c)?;
    let root_x = g.cumsum(wvx, 1)?;
    let root_z = g.cumsum(wvz, 1)?;
    let root = g.concat(&[root_x, root_y, root_z], 2)?;
    let root = g.reshape(root, &[b, t, 1, 3])?;

    let n = joints - 1;
    let offsets = g.slice(features, 2, 4, 3 * n)?;
    let offsets = g.reshape(offsets, &[b, t, n, 3])?;
    let lx = g.slice(offsets, 3, 0, 1)?;
    let ly = g.slice(offsets, 3, 1, 1)?;
    let lz = g.slice(offsets, 3, 2, 1)?;
    let cos4 = g.reshape(cos, &[b, t, 1, 1])?;
    let cos4 = g.expand(cos4, &[b, t, n, 1])?;
    let sin4 = g.reshape(sin, &[b, t, 1, 1])?;
    let sin4 = g.expand(sin4, &[b, t, n, 1])?;
    let a = g.mul(cos4, lx)?;
    let c = g.mul(sin4, lz)?;
    let ox = g.add(a, c)?;
    let a = g.mul(cos4, lz)?;
    let c = g.mul(sin4, lx)?;
    let oz = g.sub(a, c)?;
    let rotated = g.concat(&[ox, ly, oz], 3)?;
    let root_rep = g.expand(root, &[b, t, n, 3])?;
    let others = g.add(root_rep, rotated)?;
    Ok(g.concat(&[root, others], 2)?)
}

/// Global joint positions from local features.
pub fn recover_global(features: &MotionFeatures) -> Result<GlobalMotion> {
    let mut g = Graph::new();
    let (t, f) = (features.frames(), feature_dim(features.joints()));
    let x = g.constant(features.array().clone().reshape(&[1, t, f])?);
    let out = recover_global_var(&mut g, x, features.joints())?;
    let positions = g.value(out).clone().reshape(&[t, features.joints(), 3])?;
    GlobalMotion::new(positions)
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Inverse of [`recover_global`]. The heading of each frame is read from
/// the planar pelvis-to-head direction; when that is degenerate the
/// previous frame's heading is kept (`+z` for frame 0).
pub fn extract_features(motion: &GlobalMotion) -> Result<MotionFeatures> {
    let (t, j) = (motion.frames(), motion.joints());
    if t < 2 {
        return Err(Error::Layout(format!("need at least 2 frames, got {t}")));
    }
    if j < 2 {
        return Err(Error::Layout(format!("need at least 2 joints, got {j}")));
    }
    let f = feature_dim(j);
    let mut out = Array::zeros(&[t, f]);
    let mut prev_abs = 0.0;
    let mut running = 0.0;
    let mut prev_root = [0.0, 0.0];
    for n in 0..t {
        let root = motion.at(n, PELVIS);
        let head = motion.at(n, HEAD.min(j - 1));
        let (hx, hz) = (head[0] - root[0], head[2] - root[2]);
        let abs = if hx.hypot(hz) > 1e-9 { hx.atan2(hz) } else { prev_abs };
        let yaw_vel = if n == 0 { abs } else { wrap_angle(abs - prev_abs) };
        prev_abs = abs;
        running += yaw_vel;
        let (s, c) = running.sin_cos();
        let row = &mut out.data_mut()[n * f..(n + 1) * f];
        let (dx, dz) = (root[0] - prev_root[0], root[2] - prev_root[1]);
        row[0] = yaw_vel;
        row[1] = c * dx - s * dz;
        row[2] = s * dx + c * dz;
        row[3] = root[1];
        for jj in 1..j {
            let p = motion.at(n, jj);
            let (ox, oy, oz) = (p[0] - root[0], p[1] - root[1], p[2] - root[2]);
            let o = 4 + 3 * (jj - 1);
            row[o] = c * ox - s * oz;
            row[o + 1] = oy;
            row[o + 2] = s * ox + c * oz;
        }
        prev_root = [root[0], root[2]];
    }
    MotionFeatures::new(out, j)
}

/// One synthetic training example.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub features: MotionFeatures,
    pub global: GlobalMotion,
    pub label: usize,
    pub text_tag: String,
}

/// Jitter ranges for the procedural classes.
mod ranges {
    pub const SPEED: (f64, f64) = (0.03, 0.055);
    pub const START_HEADING: (f64, f64) = (-0.3, 0.3);
    pub const PELVIS_HEIGHT: (f64, f64) = (0.88, 0.96);
    pub const GAIT_PERIOD: (f64, f64) = (14.0, 20.0);
    pub const LEG_SWING: (f64, f64) = (0.12, 0.2);
    pub const ARM_SWING: (f64, f64) = (0.08, 0.15);
    pub const RADIUS: (f64, f64) = (0.8, 1.6);
    pub const ZIGZAG_AMPLITUDE: (f64, f64) = (0.5, 0.8);
    pub const ZIGZAG_PERIOD: (f64, f64) = (16.0, 32.0);
    pub const WAVE_PERIOD: (f64, f64) = (10.0, 18.0);
    pub const WAVE_AMPLITUDE: (f64, f64) = (0.1, 0.2);
    pub const SIDE_SPEED_FRACTION: (f64, f64) = (0.5, 0.7);
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..hi)
}

/// Triangle wave in [-1, 1] with unit period, 0 at x = 0.
fn triangle(x: f64) -> f64 {
    let p = x - x.floor();
    if p < 0.25 {
        4.0 * p
    } else if p < 0.75 {
        2.0 - 4.0 * p
    } else {
        4.0 * p - 4.0
    }
}

struct ClassParams {
    speed: f64,
    heading0: f64,
    height: f64,
    gait_period: f64,
    gait_phase: f64,
    leg: f64,
    arm: f64,
    radius: f64,
    zig_amp: f64,
    zig_period: f64,
    wave_period: f64,
    wave_amp: f64,
    side: f64,
}

impl ClassParams {
    fn draw(rng: &mut Rng) -> Self {
        let side_sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        Self {
            speed: uniform(rng, ranges::SPEED),
            heading0: uniform(rng, ranges::START_HEADING),
            height: uniform(rng, ranges::PELVIS_HEIGHT),
            gait_period: uniform(rng, ranges::GAIT_PERIOD),
            gait_phase: rng.gen_range(0.0..2.0 * PI),
            leg: uniform(rng, ranges::LEG_SWING),
            arm: uniform(rng, ranges::ARM_SWING),
            radius: uniform(rng, ranges::RADIUS),
            zig_amp: uniform(rng, ranges::ZIGZAG_AMPLITUDE),
            zig_period: uniform(rng, ranges::ZIGZAG_PERIOD),
            wave_period: uniform(rng, ranges::WAVE_PERIOD),
            wave_amp: uniform(rng, ranges::WAVE_AMPLITUDE),
            side: side_sign * uniform(rng, ranges::SIDE_SPEED_FRACTION),
        }
    }
}

/// Local-frame offset of joint `j` (relative to the root) for a pose.
fn joint_offset(joint: usize, p: &ClassParams, height: f64, phase: Option<f64>, wave: Option<f64>) -> [f64; 3] {
    let swing = phase.map_or(0.0, f64::sin);
    let lift = |ph: f64| 0.08 * ph.cos().max(0.0);
    match joint {
        HEAD => [0.0, 0.62, 0.08],
        LEFT_WRIST => [0.22, -0.05, -p.arm * swing],
        RIGHT_WRIST => match wave {
            Some(w) => [-0.3 + p.wave_amp * w, 0.55, 0.12],
            None => [-0.22, -0.05, p.arm * swing],
        },
        LEFT_FOOT => {
            let (z, y) = phase.map_or((0.0, 0.0), |ph| (p.leg * ph.sin(), lift(ph)));
            [0.1, y - height, z]
        }
        RIGHT_FOOT => {
            let (z, y) = phase.map_or((0.0, 0.0), |ph| (p.leg * (ph + PI).sin(), lift(ph + PI)));
            [-0.1, y - height, z]
        }
        // Extra markers for larger skeletons: rigid points up the spine.
        _ => [0.0, 0.1 * joint as f64, 0.0],
    }
}

/// Features for one procedural motion of class `label`.
fn synthesize(label: usize, frames: usize, joints: usize, rng: &mut Rng) -> Result<MotionFeatures> {
    let p = ClassParams::draw(rng);
    let f = feature_dim(joints);
    let mut data = Array::zeros(&[frames, f]);
    let walking = matches!(label, 0..=3 | 5 | 7);
    let waving = matches!(label, 4 | 5);
    let mut prev_heading = 0.0;
    for n in 0..frames {
        let nf = n as f64;
        let heading = match label {
            1 => p.heading0 - nf * p.speed / p.radius,
            2 => p.heading0 + nf * p.speed / p.radius,
            3 => p.heading0 + p.zig_amp * triangle(nf / p.zig_period),
            _ => p.heading0,
        };
        let yaw_vel = if n == 0 { heading } else { heading - prev_heading };
        prev_heading = heading;
        // Frame 0 starts at the origin.
        let (vx, vz) = match (label, n) {
            (_, 0) => (0.0, 0.0),
            (4 | 6, _) => (0.0, 0.0),
            (7, _) => (p.side * p.speed, 0.0),
            _ => (0.0, p.speed),
        };
        let phase = walking.then(|| p.gait_phase + 2.0 * PI * nf / p.gait_period);
        let wave = waving.then(|| (2.0 * PI * nf / p.wave_period).sin());
        let height = p.height + phase.map_or(0.0, |ph| 0.015 * (2.0 * ph).cos());
        let row = &mut data.data_mut()[n * f..(n + 1) * f];
        row[0] = yaw_vel;
        row[1] = vx;
        row[2] = vz;
        row[3] = height;
        for j in 1..joints {
            let o = joint_offset(j, &p, height, phase, wave);
            row[4 + 3 * (j - 1)..4 + 3 * j].copy_from_slice(&o);
        }
    }
    MotionFeatures::new(data, joints)
}

/// Deterministic synthetic dataset with balanced round-robin labels over
/// the eight classes in [`CLASS_NAMES`].
pub fn make_dataset(n: usize, frames: usize, joints: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if !frames.is_multiple_of(4) || frames < 4 {
        return Err(Error::Invalid(format!(
            "frame count {frames} must be a positive multiple of 4"
        )));
    }
    if joints < 2 {
        return Err(Error::Invalid(format!("need at least 2 joints, got {joints}")));
    }
    let mut rng = crate::rng::substream(seed, crate::rng::stream::DATASET);
    (0..n)
        .map(|i| {
            let label = i % NUM_CLASSES;
            let features = synthesize(label, frames, joints, &mut rng)?;
            let global = recover_global(&features)?;
            Ok(SyntheticSample {
                features,
                global,
                label,
                text_tag: CLASS_NAMES[label].to_string(),
            })
        })
        .collect()
}

/// Shoelace signed area of the root's `(x, z)` path.
pub fn root_signed_area(motion: &GlobalMotion) -> f64 {
    let t = motion.frames();
    let mut area = 0.0;
    for n in 0..t {
        let a = motion.at(n, PELVIS);
        let b = motion.at((n + 1) % t, PELVIS);
        area += a[0] * b[2] - b[0] * a[2];
    }
    0.5 * area
}

#[derive(Serialize, Deserialize)]
struct MotionRecord {
    label: usize,
    text_tag: String,
    global: Vec<Vec<[f64; 3]>>,
}

/// A labelled motion as stored in motion files.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledMotion {
    pub label: usize,
    pub text_tag: String,
    pub global: GlobalMotion,
}

/// Writes one JSON object per line:
/// `{"label": int, "text_tag": str, "global": [[[x,y,z] x J] x T]}`.
pub fn write_motions(path: impl AsRef<Path>, motions: &[LabelledMotion]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for m in motions {
        let rec = MotionRecord {
            label: m.label,
            text_tag: m.text_tag.clone(),
            global: m.global.to_nested(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_motions(path: impl AsRef<Path>) -> Result<Vec<LabelledMotion>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MotionRecord = serde_json::from_str(&line)?;
        out.push(LabelledMotion {
            label: rec.label,
            text_tag: rec.text_tag,
            global: GlobalMotion::from_nested(&rec.global)?,
        });
    }
    Ok(out)
}

impl From<&SyntheticSample> for LabelledMotion {
    fn from(s: &SyntheticSample) -> Self {
        Self {
            label: s.label,
            text_tag: s.text_tag.clone(),
            global: s.global.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(rows: Vec<Vec<f64>>, joints: usize) -> MotionFeatures {
        let t = rows.len();
        let data = rows.into_iter().flatten().collect();
        MotionFeatures::new(Array::new(vec![t, feature_dim(joints)], data).unwrap(), joints).unwrap()
    }

    #[test]
    fn no_motion_keeps_offsets() {
        let offsets = [0.0, 0.5, 0.1];
        let row = vec![0.0, 0.0, 0.0, 0.9, offsets[0], offsets[1], offsets[2]];
        let g = recover_global(&features(vec![row; 5], 2)).unwrap();
        for n in 0..5 {
            assert_eq!(g.at(n, 0), [0.0, 0.9, 0.0]);
            assert_eq!(g.at(n, 1), [0.0, 1.4, 0.1]);
        }
    }

    #[test]
    fn straight_line_accumulates_velocity() {
        let v = 0.25;
        let row = vec![0.0, v, 0.0, 1.0, 0.0, 0.0, 0.0];
        let g = recover_global(&features(vec![row; 8], 2)).unwrap();
        for n in 1..=8 {
            assert!((g.at(n - 1, 0)[0] - n as f64 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let data = Array::zeros(&[4, 9]);
        assert!(matches!(MotionFeatures::new(data, 3), Err(Error::Layout(_))));
    }

    #[test]
    fn joint_names_resolve() {
        assert_eq!(joint_index("left foot"), Some(LEFT_FOOT));
        assert_eq!(joint_index("right_wrist"), Some(RIGHT_WRIST));
        assert_eq!(joint_index("tail"), None);
    }

    #[test]
    fn spatial_control_zeroes_masked_targets() {
        let mut t = Array::full(&[2, 2, 3], 1.0);
        t.set(&[0, 0, 0], 5.0);
        let mut m = Array::zeros(&[2, 2]);
        m.set(&[1, 1], 1.0);
        let s = SpatialControl::new(t, m).unwrap();
        assert_eq!(s.target(0, 0), [0.0; 3]);
        assert_eq!(s.target(1, 1), [1.0; 3]);
        assert_eq!(s.active_entries(), vec![(1, 1)]);
    }

    #[test]
    fn extract_defaults_heading_for_degenerate_frames() {
        // Head straight above the pelvis: heading undefined, falls back to +z.
        let pos = Array::new(
            vec![2, 2, 3],
            vec![0.0, 1.0, 0.0, 0.0, 1.5, 0.0, 0.0, 1.0, 0.3, 0.0, 1.5, 0.3],
        )
        .unwrap();
        let f = extract_features(&GlobalMotion::new(pos).unwrap()).unwrap();
        let d = f.array().data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[7], 0.0);
        assert!((d[9] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn dataset_labels_round_robin() {
        let ds = make_dataset(11, 16, 6, 1).unwrap();
        let labels: Vec<_> = ds.iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![0, 1, 2, 3, 4, 5, 6, 7, 0, 1, 2]);
        assert!(make_dataset(4, 18, 6, 1).is_err());
    }
}
