//! End-to-end acceptance run: trains the desk-scale models and prints one
//! PASS/FAIL line per criterion. Exits nonzero when any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use diffcore::{gradcheck, primitive_set, Array, Graph, Var};
use maskmotion::checkpoint;
use maskmotion::config::{EditConfig, RunConfig, TokenizerConfig};
use maskmotion::editctl::{self, Obstacle};
use maskmotion::eval::{self, cross_combinations, density_levels, Evaluator, MetricReport, Protocol};
use maskmotion::kinematics::{
    extract_features, make_dataset, recover_global, recover_global_var, root_signed_area, JOINT_NAMES, NUM_CLASSES,
    PELVIS,
};
use maskmotion::maskmodel::{
    cfg_logits, forward_base, forward_controlled, predict_logits, BaseWeights, ControlWeights, MaskedTokens, ModelDims,
};
use maskmotion::nn::named_arrays;
use maskmotion::pipeline::{edit_logits, generate, GenerationRequest, Models};
use maskmotion::rng::substream;
use maskmotion::tokenizer::{quantize, TokenizerWeights};
use maskmotion::workflow::{self, RunPaths, Stage, Trained};
use maskmotion::Result;
use rand::Rng as _;

const GRAD_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const ABLATION_MAX_ERR: f64 = 0.05;
const ABLATION_BUDGET: Duration = Duration::from_secs(20 * 60);
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const PIPELINE_BUDGET: Duration = Duration::from_secs(30 * 60);
const ROUND_TRIP_TOL: f64 = 1e-9;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(lines: &mut Vec<Line>, id: usize, name: &'static str, outcome: Result<(bool, String)>) {
    let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("[{}] {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    lines.push(Line { id, name, pass, detail });
}

fn random_array(rng: &mut maskmotion::rng::Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn weighted_sum(g: &mut Graph, y: Var, rng: &mut maskmotion::rng::Rng) -> diffcore::Result<Var> {
    let w = random_array(rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Case = (
    &'static str,
    Vec<usize>,
    f64,
    f64,
    fn(&mut Graph, Var) -> diffcore::Result<Var>,
);

fn other(g: &mut Graph, shape: &[usize]) -> Var {
    let mut rng = substream(5, "other");
    g.param(random_array(&mut rng, shape, 0.5, 2.0))
}

fn primitive_cases() -> Vec<Case> {
    vec![
        ("add", vec![3, 4], -2.0, 2.0, |g, x| {
            let o = other(g, &[3, 4]);
            g.add(x, o)
        }),
        ("sub", vec![3, 4], -2.0, 2.0, |g, x| {
            let o = other(g, &[3, 4]);
            g.sub(o, x)
        }),
        ("mul", vec![3, 4], -2.0, 2.0, |g, x| {
            let o = other(g, &[3, 4]);
            g.mul(x, o)
        }),
        ("div", vec![3, 4], 0.5, 2.0, |g, x| {
            let o = other(g, &[3, 4]);
            let a = g.div(x, o)?;
            let b = g.div(o, x)?;
            g.add(a, b)
        }),
        ("neg", vec![5], -2.0, 2.0, |g, x| g.neg(x)),
        ("scale", vec![5], -2.0, 2.0, |g, x| g.scale(x, 1.7)),
        ("offset", vec![5], -2.0, 2.0, |g, x| g.offset(x, -0.4)),
        ("matmul", vec![2, 3, 4], -1.0, 1.0, |g, x| {
            let mut rng = substream(6, "matmul");
            let b = g.param(random_array(&mut rng, &[2, 4, 3], -1.0, 1.0));
            let y = g.matmul(x, b)?;
            let t = g.transpose(x)?;
            let z = g.matmul(t, x)?;
            let s = g.sum(z)?;
            let y = g.sum(y)?;
            g.add(y, s)
        }),
        ("transpose", vec![3, 5], -1.0, 1.0, |g, x| g.transpose(x)),
        ("permute", vec![2, 3, 4], -1.0, 1.0, |g, x| g.permute(x, &[1, 2, 0])),
        ("reshape", vec![2, 6], -1.0, 1.0, |g, x| g.reshape(x, &[4, 3])),
        ("expand", vec![3, 1], -1.0, 1.0, |g, x| g.expand(x, &[2, 3, 5])),
        ("concat", vec![2, 3], -1.0, 1.0, |g, x| {
            let s = g.square(x)?;
            g.concat(&[s, x], 0)
        }),
        ("slice", vec![4, 5], -1.0, 1.0, |g, x| g.slice(x, 0, 1, 2)),
        ("gather", vec![5, 3], -1.0, 1.0, |g, x| g.gather(x, &[1, 1, 4, 0])),
        ("sum_axis", vec![3, 4, 2], -1.0, 1.0, |g, x| g.sum_axis(x, 2)),
        ("mean_axis", vec![3, 4], -1.0, 1.0, |g, x| g.mean_axis(x, 1)),
        ("sum", vec![3, 4], -1.0, 1.0, |g, x| {
            let s = g.sum(x)?;
            g.square(s)
        }),
        ("mean", vec![3, 4], -1.0, 1.0, |g, x| {
            let s = g.mean(x)?;
            g.square(s)
        }),
        ("exp", vec![5], -2.0, 2.0, |g, x| g.exp(x)),
        ("log", vec![5], 0.3, 3.0, |g, x| g.log(x)),
        ("sqrt", vec![5], 0.3, 3.0, |g, x| g.sqrt(x)),
        ("square", vec![5], -2.0, 2.0, |g, x| g.square(x)),
        ("abs_smooth", vec![5], -2.0, 2.0, |g, x| g.abs_smooth(x)),
        ("relu", vec![6], -2.0, 2.0, |g, x| g.relu(x)),
        ("softmax", vec![3, 5], -3.0, 3.0, |g, x| g.softmax(x)),
        ("layer_norm", vec![3, 6], -2.0, 2.0, |g, x| g.layer_norm(x, 1e-5)),
        ("norm", vec![4, 3], -2.0, 2.0, |g, x| g.norm(x)),
        ("cumsum", vec![2, 5, 3], -1.0, 1.0, |g, x| g.cumsum(x, 1)),
        ("sin", vec![5], -3.0, 3.0, |g, x| g.sin(x)),
        ("cos", vec![5], -3.0, 3.0, |g, x| g.cos(x)),
        ("min_const", vec![6], -2.0, 2.0, |g, x| g.min_const(x, 0.3)),
    ]
}

/// Largest relative error between an analytic gradient and central
/// differences of `numeric`.
fn compare(analytic: &Array, x: &Array, numeric: impl Fn(&Array) -> Result<f64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += FD_STEP;
        let mut m = x.clone();
        m.data_mut()[i] -= FD_STEP;
        let n = (numeric(&p)? - numeric(&m)?) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        worst = worst.max((a - n).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// `stop_gradient` and `straight_through` change the gradient but not the
/// value, so their analytic gradients are compared with finite differences
/// of the surrogate they stand for: `x * sg(x)` against `x * x0` with `x0`
/// frozen, and `st(h, x^2)` against `x^2`.
fn surrogate_checks() -> Result<f64> {
    let mut rng = substream(19, "surrogate");
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x = random_array(&mut rng, &[5], -2.0, 2.0);
        let w = random_array(&mut rng, &[5], -1.0, 1.0);
        let hard = random_array(&mut rng, &[5], -1.0, 1.0);
        let weigh = |g: &mut Graph, y: Var| -> diffcore::Result<Var> {
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            g.sum(p)
        };

        let mut g = Graph::new();
        let v = g.param(x.clone());
        let s = g.stop_gradient(v)?;
        let y = g.mul(v, s)?;
        let l = weigh(&mut g, y)?;
        let analytic = g.backward(l)?.wrt(v);
        worst = worst.max(compare(&analytic, &x, |p| {
            let mut h = Graph::new();
            let v = h.constant(p.clone());
            let c = h.constant(x.clone());
            let y = h.mul(v, c)?;
            let l = weigh(&mut h, y)?;
            Ok(h.value(l).item())
        })?);

        let mut g = Graph::new();
        let v = g.param(x.clone());
        let sq = g.square(v)?;
        let y = g.straight_through(hard.clone(), sq)?;
        let l = weigh(&mut g, y)?;
        let analytic = g.backward(l)?.wrt(v);
        worst = worst.max(compare(&analytic, &x, |p| {
            let mut h = Graph::new();
            let v = h.constant(p.clone());
            let y = h.square(v)?;
            let l = weigh(&mut h, y)?;
            Ok(h.value(l).item())
        })?);
    }
    Ok(worst)
}

fn small_tokenizer(seed: u64) -> TokenizerWeights {
    let cfg = TokenizerConfig {
        codebook_size: 6,
        code_dim: 4,
        levels: 2,
        hidden: 8,
        ..TokenizerConfig::default()
    };
    TokenizerWeights::init(&cfg, JOINT_NAMES.len(), seed)
}

fn chain_positions(g: &mut Graph, tok: &TokenizerWeights, e: Var) -> Result<Var> {
    let s = g.shape(e).to_vec();
    let e = g.reshape(e, &[1, s[0], s[1]])?;
    let dec = tok.bind_decoder(g);
    let f = dec.decode(g, e)?;
    let p = recover_global_var(g, f, JOINT_NAMES.len())?;
    let ps = g.shape(p).to_vec();
    Ok(g.reshape(p, &[ps[1], ps[2], 3])?)
}

fn criterion_gradients() -> Result<(bool, String)> {
    let start = Instant::now();
    let cases = primitive_cases();
    let mut worst: (f64, &str) = (0.0, "");
    for (name, shape, lo, hi, f) in &cases {
        let mut rng = substream(17, name);
        for trial in 0..5u64 {
            let x = random_array(&mut rng, shape, *lo, *hi);
            let err = gradcheck(
                |g, v| {
                    let y = f(g, v)?;
                    let mut wr = substream(trial, "weights");
                    weighted_sum(g, y, &mut wr)
                },
                &x,
                FD_STEP,
            )?;
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    let surrogate = surrogate_checks()?;
    if surrogate > worst.0 {
        worst = (surrogate, "stop_gradient/straight_through");
    }
    let mut covered: Vec<&str> = cases.iter().map(|c| c.0).collect();
    covered.extend(["stop_gradient", "straight_through"]);
    let missing: Vec<&&str> = primitive_set().iter().filter(|p| !covered.contains(p)).collect();

    // The editing chain: logits -> Gumbel-softmax -> straight-through
    // embedding -> decoder -> global positions -> consistency loss. Its
    // gradient must equal that of the frozen-hard surrogate
    // H + P(x) C - P(x0) C evaluated through the same downstream chain.
    let mut chain_worst: f64 = 0.0;
    for seed in 0..3u64 {
        let tok = small_tokenizer(seed);
        let table = tok.codebook().base().clone();
        let (t, k) = (4, table.shape()[0]);
        let mut rng = substream(seed, "chain");
        let logits = random_array(&mut rng, &[t, k], -1.5, 1.5);
        let noise = editctl::gumbel_noise(&[t, k], &mut rng);
        let gt = make_dataset(1, 4 * t, JOINT_NAMES.len(), seed)?.remove(0).global;
        let control = eval::random_entries(&gt, 5, &mut rng)?;
        let tau = 0.7;

        let mut g = Graph::new();
        let lv = g.param(logits.clone());
        let p = editctl::gumbel_softmax(&mut g, lv, Some(&noise), tau)?;
        let tv = g.constant(table.clone());
        let e = editctl::dcse_embed(&mut g, p, tv)?;
        let pos = chain_positions(&mut g, &tok, e)?;
        let loss = editctl::consistency_loss(&mut g, pos, &control)?;
        let analytic = g.backward(loss)?.wrt(lv);
        let hard = g.value(e).clone();
        let soft0 = {
            let mut h = Graph::new();
            let l = h.constant(logits.clone());
            let p = editctl::gumbel_softmax(&mut h, l, Some(&noise), tau)?;
            let tv = h.constant(table.clone());
            let s = editctl::dcse_soft(&mut h, p, tv)?;
            h.value(s).clone()
        };
        let err = compare(&analytic, &logits, |x| {
            let mut h = Graph::new();
            let l = h.constant(x.clone());
            let p = editctl::gumbel_softmax(&mut h, l, Some(&noise), tau)?;
            let tv = h.constant(table.clone());
            let s = editctl::dcse_soft(&mut h, p, tv)?;
            let base = h.constant(hard.clone());
            let s0 = h.constant(soft0.clone());
            let d = h.sub(s, s0)?;
            let e = h.add(base, d)?;
            let pos = chain_positions(&mut h, &tok, e)?;
            let l = editctl::consistency_loss(&mut h, pos, &control)?;
            Ok(h.value(l).item())
        })?;
        chain_worst = chain_worst.max(err);
    }
    let elapsed = start.elapsed();
    let pass = worst.0 < GRAD_TOL && chain_worst < GRAD_TOL && missing.is_empty() && elapsed < GRADCHECK_BUDGET;
    Ok((
        pass,
        format!(
            "{} primitives, worst {:.2e} ({}), chain {:.2e}, missing {:?}, {:.1}s",
            cases.len(),
            worst.0,
            worst.1,
            chain_worst,
            missing,
            elapsed.as_secs_f64()
        ),
    ))
}

fn criterion_zero_init(cfg: &RunConfig) -> Result<(bool, String)> {
    let dims = ModelDims::from_config(cfg);
    let base = BaseWeights::init(&dims, 3);
    let control = ControlWeights::init(&base);
    let mut rng = substream(21, "zero-init");
    let t = dims.tokens;
    let width = dims.spatial_width();
    let mut equal = 0;
    for _ in 0..100 {
        let ids: Vec<usize> = (0..t)
            .map(|_| {
                if rng.gen_bool(0.4) {
                    dims.mask_id()
                } else {
                    rng.gen_range(0..dims.codebook_size)
                }
            })
            .collect();
        let x = MaskedTokens::new(ids, dims.mask_id())?;
        let label = if rng.gen_bool(0.2) {
            None
        } else {
            Some(rng.gen_range(0..NUM_CLASSES))
        };
        let spatial = random_array(&mut rng, &[t, width], -2.0, 2.0);
        let a = forward_base(&x, label, &base)?;
        let b = forward_controlled(&x, label, &spatial, &base, &control)?;
        if a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()) {
            equal += 1;
        }
    }
    Ok((equal == 100, format!("{equal}/100 bit-equal")))
}

fn criterion_vq() -> Result<(bool, String)> {
    let mut rng = substream(31, "vq");
    let mut exact = 0;
    for _ in 0..1000 {
        let k = rng.gen_range(1..40);
        let d = rng.gen_range(1..12);
        let n = rng.gen_range(1..8);
        let table = random_array(&mut rng, &[k, d], -2.0, 2.0);
        let z = random_array(&mut rng, &[n, d], -2.5, 2.5);
        let (ids, rows) = quantize(&z, &table)?;
        let ok = (0..n).all(|i| {
            let zi = z.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..k {
                let dist: f64 = zi.iter().zip(table.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = j;
                }
            }
            ids[i] == best && rows.row(i) == table.row(best)
        });
        exact += ok as usize;
    }
    Ok((exact == 1000, format!("{exact}/1000 match exhaustive search")))
}

fn criterion_dcse() -> Result<(bool, String)> {
    let mut rng = substream(41, "dcse");
    let (mut rows_ok, mut worst): (usize, f64) = (0, 0.0);
    for _ in 0..100 {
        let (n, k, d) = (rng.gen_range(1..6), rng.gen_range(2..9), rng.gen_range(1..6));
        let logits = random_array(&mut rng, &[n, k], -2.0, 2.0);
        let mut h = Graph::new();
        let l = h.constant(logits.clone());
        let probs = h.softmax(l)?;
        let probs = h.value(probs).clone();
        let table = random_array(&mut rng, &[k, d], -1.0, 1.0);
        let w = random_array(&mut rng, &[n, d], -1.0, 1.0);

        let mut g = Graph::new();
        let pv = g.param(probs.clone());
        let tv = g.param(table.clone());
        let e = editctl::dcse_embed(&mut g, pv, tv)?;
        let value = g.value(e).clone();
        let good = (0..n).all(|i| {
            let row = probs.row(i);
            let arg = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            value.row(i) == table.row(arg)
        });
        rows_ok += good as usize;
        let wv = g.constant(w.clone());
        let m = g.mul(e, wv)?;
        let loss = g.sum(m)?;
        let grads = g.backward(loss)?;
        let soft = |p: &Array, c: &Array| -> Result<f64> {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..d {
                    let v: f64 = (0..k).map(|q| p.row(i)[q] * c.row(q)[j]).sum();
                    s += w.row(i)[j] * v;
                }
            }
            Ok(s)
        };
        let ep = compare(&grads.wrt(pv), &probs, |p| soft(p, &table))?;
        let et = compare(&grads.wrt(tv), &table, |c| soft(&probs, c))?;
        worst = worst.max(ep).max(et);
    }
    Ok((
        rows_ok == 100 && worst < GRAD_TOL,
        format!("{rows_ok}/100 exact rows, backward worst {worst:.2e}"),
    ))
}

fn criterion_kinematics() -> Result<(bool, String)> {
    let ds = make_dataset(400, 64, JOINT_NAMES.len(), 51)?;
    let mut worst: f64 = 0.0;
    let mut classes = [false; NUM_CLASSES];
    let (mut signs, mut circles) = (0, 0);
    for s in &ds {
        let back = extract_features(&s.global)?;
        worst = worst.max(back.array().max_abs_diff(s.features.array()));
        let again = recover_global(&back)?;
        worst = worst.max(again.array().max_abs_diff(s.global.array()));
        classes[s.label] = true;
        let area = root_signed_area(&s.global);
        match s.label {
            1 => {
                circles += 1;
                signs += (area > 0.0) as usize;
            }
            2 => {
                circles += 1;
                signs += (area < 0.0) as usize;
            }
            _ => {}
        }
    }
    let all = classes.iter().all(|&c| c);
    Ok((
        worst < ROUND_TRIP_TOL && all && signs == circles,
        format!(
            "round trip {worst:.2e} over {} samples, circle signs {signs}/{circles}",
            ds.len()
        ),
    ))
}

fn report_rows(rows: &[MetricReport]) -> String {
    rows.iter()
        .map(|r| format!("{:.4}", r.avg_err))
        .collect::<Vec<_>>()
        .join(" ")
}

fn criterion_ablation(ev: &Evaluator, rows: &[MetricReport], elapsed: Duration) -> (bool, String) {
    let e: Vec<f64> = rows.iter().map(|r| r.avg_err).collect();
    let trend = e.len() == 8 && e[0] > e[1] && e[1] > e[2] && e[2] > e[3];
    let full = e.len() == 8 && e[7] <= ABLATION_MAX_ERR;
    let samples = rows.first().map_or(0, |r| r.samples);
    (
        trend && full && samples >= 20 && elapsed < ABLATION_BUDGET,
        format!(
            "avg err by row [{}]; none>logit>code>both {}; all-on {:.4} (<= {ABLATION_MAX_ERR}) {}; {} samples x {} keyframes; {:.0}s",
            report_rows(rows),
            trend,
            e.get(7).copied().unwrap_or(f64::NAN),
            full,
            samples,
            ev.cfg.eval.keyframes,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_descent(ev: &Evaluator) -> Result<(bool, String)> {
    let cfg = ev.cfg;
    let models = &ev.models;
    let dims = &models.base.dims;
    let t = cfg.frames / 4;
    let mut rng = substream(61, "descent");
    let mut held = 0;
    let mut moved = 0;
    for trial in 0..100 {
        let s = &ev.heldout[trial % ev.heldout.len()];
        let control = eval::random_entries(&s.global, 5, &mut rng)?;
        let mut req = GenerationRequest::new(cfg, Some(s.label), trial as u64);
        req.spatial = Some(control);
        req.edit = EditConfig {
            logit_lr: 0.06,
            logit_steps: 20,
            ..EditConfig::fast()
        };
        // A partially decoded state: about half the positions hold random
        // fixed tokens, the rest are masked.
        let ids: Vec<usize> = (0..t)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    dims.mask_id()
                } else {
                    rng.gen_range(0..dims.codebook_size)
                }
            })
            .collect();
        let x = MaskedTokens::new(ids, dims.mask_id())?;
        let raw = predict_logits(models.base, None, &[&x, &x], &[Some(s.label), None], None)?;
        let half = t * dims.codebook_size;
        let cond = Array::new(vec![t, dims.codebook_size], raw.data()[..half].to_vec())?;
        let uncond = Array::new(vec![t, dims.codebook_size], raw.data()[half..].to_vec())?;
        let logits = cfg_logits(&cond, &uncond, req.cfg_scale)?;
        let noise = editctl::gumbel_noise(&[t, dims.codebook_size], &mut rng);
        let (_, trace) = edit_logits(&req, models, &logits, &x, &noise)?;
        let (first, last) = (trace[0], *trace.last().expect("trace"));
        held += (last <= first) as usize;
        moved += (last < first) as usize;
    }
    Ok((
        held >= 95,
        format!("{held}/100 non-increasing ({moved} strictly decreased)"),
    ))
}

fn criterion_obstacle(ev: &Evaluator) -> Result<(bool, String)> {
    let cfg = ev.cfg;
    let (frames, joints) = (cfg.frames, cfg.skeleton.joints);
    let mut sel = vec![0.0; frames * joints];
    for n in 0..frames {
        sel[n * joints + PELVIS] = 1.0;
    }
    let selector = Array::new(vec![frames, joints], sel)?;
    let mut clear = 0;
    let mut intersecting = 0;
    let mut identical = 0;
    let mut min_seen = f64::INFINITY;
    for seed in 0..20u64 {
        let plain = GenerationRequest::new(cfg, Some(0), 500 + seed);
        let unedited = generate(&plain, &ev.models)?;
        let mid = unedited.motion.at(frames / 2, PELVIS);
        let sphere = Obstacle::sphere(mid, 0.5, 0.1)?;
        let before = maskmotion::pipeline::obstacle_report(&unedited.motion, std::slice::from_ref(&sphere), &selector);
        intersecting += (before.min_sdf < 0.0) as usize;
        let mut req = plain.clone();
        req.obstacles = vec![sphere];
        req.obstacle_selector = Some(selector.clone());
        let avoided = generate(&req, &ev.models)?;
        let r = avoided.obstacle_report.expect("report");
        min_seen = min_seen.min(r.min_sdf);
        clear += (r.min_sdf >= 0.0) as usize;

        let far = Obstacle::sphere([100.0, 0.0, 100.0], 0.5, 0.1)?;
        let mut req = plain.clone();
        req.obstacles = vec![far];
        req.obstacle_selector = Some(selector.clone());
        let same = generate(&req, &ev.models)?;
        let bits = |a: &Array| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        identical += (bits(same.motion.array()) == bits(unedited.motion.array())) as usize;
    }
    Ok((
        clear >= 18 && identical == 20 && intersecting == 20,
        format!(
            "clear {clear}/20 (worst min SDF {min_seen:.3}), path intersected before editing {intersecting}/20, far obstacle bit-identical {identical}/20"
        ),
    ))
}

fn combinations_oracle() -> Vec<Vec<&'static str>> {
    fn pick(from: &[&'static str], size: usize) -> Vec<Vec<&'static str>> {
        if size == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for (i, &head) in from.iter().enumerate() {
            for mut rest in pick(&from[i + 1..], size - 1) {
                rest.insert(0, head);
                out.push(rest);
            }
        }
        out
    }
    let order = ["pelvis", "left_foot", "right_foot", "head", "left_wrist", "right_wrist"];
    (1..=6).flat_map(|s| pick(&order, s)).collect()
}

fn criterion_protocols(ev: &Evaluator, components: &[MetricReport]) -> Result<(bool, String)> {
    let cross: Vec<Vec<&str>> = cross_combinations()
        .iter()
        .map(|s| s.iter().map(|&j| JOINT_NAMES[j]).collect())
        .collect();
    let cross_ok = cross == combinations_oracle() && cross.len() == 63;

    let levels = density_levels(ev.cfg.frames);
    let mut small = ev.cfg.clone();
    small.eval.samples = 3;
    let quick = Evaluator {
        cfg: &small,
        models: ev.models,
        heldout: ev.heldout,
    };
    let none = Protocol {
        edit: EditConfig::none(),
        use_control: false,
    };
    let sweep = quick.density_sweep(PELVIS, &levels, &none)?;
    let dens: Vec<usize> = sweep.iter().map(|r| r.density).collect();
    let density_ok = dens == [1, 2, 5, 16, 64];

    let grid: Vec<String> = components
        .iter()
        .map(|r| r.name.split_whitespace().skip(1).collect::<Vec<_>>().join(" "))
        .collect();
    let expected: Vec<String> = (0..8)
        .map(|i| format!("logit={} code={} control={}", i & 1, (i >> 1) & 1, (i >> 2) & 1))
        .collect();
    let comp_ok = grid == expected;
    Ok((
        cross_ok && density_ok && comp_ok,
        format!(
            "cross {} sets in order {cross_ok}; density levels {dens:?}; components {} rows on the toggle grid {comp_ok}",
            cross.len(),
            components.len()
        ),
    ))
}

fn bits_of(arrays: &[(String, Array)]) -> Vec<(String, Vec<u64>)> {
    arrays
        .iter()
        .map(|(n, a)| (n.clone(), a.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn criterion_determinism(cfg: &RunConfig, trained: &Trained, ev: &Evaluator) -> Result<(bool, String)> {
    let dir = tempfile::tempdir().map_err(|e| maskmotion::Error::Invalid(e.to_string()))?;
    let mut small = cfg.clone();
    small.dataset.train_size = 32;
    small.tokenizer.epochs = 2;
    small.transformer.epochs = 2;
    small.control.epochs = 1;
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let paths = RunPaths::new(dir.path().join(run));
        let mut h = Vec::new();
        for stage in [Stage::Tokenizer, Stage::Base, Stage::Control] {
            workflow::train_stage(&small, &paths, stage, None)?;
        }
        for stem in [paths.tokenizer(), paths.base(), paths.control()] {
            h.push(checkpoint::blob_hash(stem)?);
        }
        hashes.push(h);
    }
    let checkpoints_equal = hashes[0] == hashes[1];

    let stems = RunPaths::new(dir.path().join("roundtrip"));
    checkpoint::save_tokenizer(stems.tokenizer(), &trained.tokenizer, cfg.seed)?;
    checkpoint::save_base(stems.base(), &trained.base, cfg.seed)?;
    checkpoint::save_control(stems.control(), &trained.control, cfg.seed)?;
    let back = Trained::load(&stems)?;
    let tok_eq = bits_of(&named_arrays(&back.tokenizer.net, "net"))
        == bits_of(&named_arrays(&trained.tokenizer.net, "net"))
        && back.tokenizer.mean == trained.tokenizer.mean
        && back.tokenizer.std == trained.tokenizer.std;
    let base_eq = bits_of(&named_arrays(&back.base.net, "net")) == bits_of(&named_arrays(&trained.base.net, "net"));
    let ctrl_eq =
        bits_of(&named_arrays(&back.control.net, "net")) == bits_of(&named_arrays(&trained.control.net, "net"));

    let s = &ev.heldout[0];
    let mut req = GenerationRequest::new(cfg, Some(s.label), 77);
    req.spatial = Some(eval::random_entries(&s.global, 5, &mut substream(71, "det"))?);
    req.edit = cfg.profiles.accurate.clone();
    req.edit.code_steps = 50;
    req.edit.logit_steps = 5;
    let a = generate(&req, &ev.models)?;
    let b = generate(&req, &back.models())?;
    let motion_eq = a.motion.array().data().iter().map(|v| v.to_bits()).eq(b
        .motion
        .array()
        .data()
        .iter()
        .map(|v| v.to_bits()))
        && a.tokens == b.tokens;

    let mut tiny = cfg.clone();
    tiny.eval.samples = 3;
    let p = Protocol {
        edit: req.edit.clone(),
        use_control: true,
    };
    let run = |models: Models| -> Result<MetricReport> {
        let e = Evaluator {
            cfg: &tiny,
            models,
            heldout: ev.heldout,
        };
        let controls = (0..3)
            .map(|k| eval::random_entries(&ev.heldout[k].global, 5, &mut substream(72, "det")))
            .collect::<Result<Vec<_>>>()?;
        e.run_row("det", &[], 5, &controls, &p)
    };
    let metrics_eq = run(ev.models)? == run(back.models())?;
    Ok((
        checkpoints_equal && tok_eq && base_eq && ctrl_eq && motion_eq && metrics_eq,
        format!(
            "retrained blobs equal {checkpoints_equal}; round trip tokenizer {tok_eq} base {base_eq} control {ctrl_eq}; motion {motion_eq}; metrics {metrics_eq}"
        ),
    ))
}

fn main() -> ExitCode {
    let cfg = RunConfig::default();
    let mut lines = Vec::new();

    report(&mut lines, 1, "gradient correctness", criterion_gradients());
    report(&mut lines, 2, "zero-init equivalence", criterion_zero_init(&cfg));
    report(&mut lines, 3, "vector quantization oracle", criterion_vq());
    report(&mut lines, 4, "straight-through contract", criterion_dcse());
    report(&mut lines, 10, "kinematics", criterion_kinematics());

    let pipeline_start = Instant::now();
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("cannot create a temporary directory: {e}");
            return ExitCode::FAILURE;
        }
    };
    let paths = RunPaths::new(dir.path());
    let trained = (|| -> Result<Trained> {
        for stage in [Stage::Tokenizer, Stage::Base, Stage::Control] {
            let t = Instant::now();
            workflow::train_stage(&cfg, &paths, stage, None)?;
            println!("       trained {} in {:.0}s", stage.name(), t.elapsed().as_secs_f64());
        }
        Trained::load(&paths)
    })();
    let trained = match trained {
        Ok(t) => t,
        Err(e) => {
            for (id, name) in [
                (5, "component ablation"),
                (6, "editing descent"),
                (7, "obstacle avoidance"),
                (8, "protocol fidelity"),
                (9, "determinism and persistence"),
                (11, "end-to-end budget"),
            ] {
                report(&mut lines, id, name, Ok((false, format!("training failed: {e}"))));
            }
            return ExitCode::FAILURE;
        }
    };
    let heldout = match workflow::heldout_set(&cfg) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("held-out set: {e}");
            return ExitCode::FAILURE;
        }
    };
    let ev = Evaluator {
        cfg: &cfg,
        models: trained.models(),
        heldout: &heldout,
    };

    let t = Instant::now();
    let components = ev.components(&cfg.profiles.accurate);
    let ablation_time = t.elapsed();
    let components = match components {
        Ok(rows) => {
            report(
                &mut lines,
                5,
                "component ablation",
                Ok(criterion_ablation(&ev, &rows, ablation_time)),
            );
            rows
        }
        Err(e) => {
            report(&mut lines, 5, "component ablation", Err(e));
            Vec::new()
        }
    };
    report(&mut lines, 6, "editing descent", criterion_descent(&ev));
    report(&mut lines, 7, "obstacle avoidance", criterion_obstacle(&ev));
    report(
        &mut lines,
        8,
        "protocol fidelity",
        criterion_protocols(&ev, &components),
    );
    let pipeline_time = pipeline_start.elapsed();

    report(
        &mut lines,
        9,
        "determinism and persistence",
        criterion_determinism(&cfg, &trained, &ev),
    );
    report(
        &mut lines,
        11,
        "end-to-end budget",
        Ok((
            pipeline_time < PIPELINE_BUDGET,
            format!("training plus criteria 5-8 took {:.0}s", pipeline_time.as_secs_f64()),
        )),
    );

    lines.sort_by_key(|l| l.id);
    let failed: Vec<&Line> = lines.iter().filter(|l| !l.pass).collect();
    println!();
    for l in &lines {
        println!("{} {:>2} {}", if l.pass { "PASS" } else { "FAIL" }, l.id, l.name);
    }
    if failed.is_empty() {
        println!("all {} criteria passed", lines.len());
        ExitCode::SUCCESS
    } else {
        for l in &failed {
            eprintln!("failed {}: {}", l.id, l.detail);
        }
        ExitCode::FAILURE
    }
}
