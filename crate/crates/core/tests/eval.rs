use diffcore::Array;
use maskmotion::config::{EditConfig, RunConfig};
use maskmotion::eval::*;
use maskmotion::kinematics::*;
use maskmotion::maskmodel::{BaseWeights, ControlWeights, ModelDims};
use maskmotion::pipeline::Models;
use maskmotion::rng::substream;
use maskmotion::tokenizer::TokenizerWeights;

fn motion(frames: usize, joints: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> GlobalMotion {
    let mut data = Vec::with_capacity(frames * joints * 3);
    for n in 0..frames {
        for j in 0..joints {
            data.extend_from_slice(&f(n, j));
        }
    }
    GlobalMotion::new(Array::new(vec![frames, joints, 3], data).unwrap()).unwrap()
}

#[test]
fn keyframe_errors_on_a_hand_example() {
    let gen = motion(4, 2, |_, _| [0.0; 3]);
    let mut s = SpatialControl::empty(4, 2);
    s.set(1, 0, [0.3, 0.0, 0.0]);
    s.set(2, 1, [0.0, 0.0, 0.0]);
    let e = keyframe_errors(&gen, &s, 0.5).unwrap();
    assert_eq!((e.traj_err, e.loc_err), (0.0, 0.0));
    assert!((e.avg_err - 0.15).abs() < 1e-15);
    let e = keyframe_errors(&gen, &s, 0.2).unwrap();
    assert_eq!((e.traj_err, e.loc_err), (1.0, 0.5));
}

#[test]
fn keyframe_errors_match_a_per_entry_loop() {
    let mut rng = substream(1, "kf");
    let gt = make_dataset(3, 16, 6, 2).unwrap();
    for sample in &gt {
        let s = random_entries(&sample.global, 9, &mut rng).unwrap();
        let gen = &gt[0].global;
        let d: Vec<f64> = s
            .active_entries()
            .iter()
            .map(|&(n, j)| {
                let (a, b) = (gen.at(n, j), s.target(n, j));
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            })
            .collect();
        let e = keyframe_errors(gen, &s, 0.3).unwrap();
        let over = d.iter().filter(|&&x| x > 0.3).count() as f64;
        assert!((e.avg_err - d.iter().sum::<f64>() / 9.0).abs() < 1e-12);
        assert_eq!(e.loc_err, over / 9.0);
        assert_eq!(e.traj_err, (over > 0.0) as u8 as f64);
        assert!(e.traj_err >= e.loc_err);
    }
}

#[test]
fn keyframe_errors_reject_empty_or_mismatched_controls() {
    let gen = motion(4, 2, |_, _| [0.0; 3]);
    assert!(keyframe_errors(&gen, &SpatialControl::empty(4, 2), 0.5).is_err());
    let mut s = SpatialControl::empty(5, 2);
    s.set(0, 0, [0.0; 3]);
    assert!(keyframe_errors(&gen, &s, 0.5).is_err());
}

#[test]
fn foot_skate_counts_grounded_sliding_transitions() {
    let step = |n: usize, j: usize| {
        if j == LEFT_FOOT {
            // Grounded and sliding 0.1 per frame for the first three frames.
            if n < 3 {
                [0.1 * n as f64, 0.0, 0.0]
            } else {
                [0.2, 0.5, 0.0]
            }
        } else {
            [0.0, 1.0, 0.0]
        }
    };
    let m = motion(5, 6, step);
    assert_eq!(foot_skate(&m, 0.05, 0.025), 2.0 / 4.0);
    let still = motion(5, 6, |_, _| [0.0; 3]);
    assert_eq!(foot_skate(&still, 0.05, 0.025), 0.0);
    let lifted = motion(5, 6, |n, _| [0.1 * n as f64, 0.3, 0.0]);
    assert_eq!(foot_skate(&lifted, 0.05, 0.025), 0.0);
    assert_eq!(foot_skate(&motion(1, 6, |_, _| [0.0; 3]), 0.05, 0.025), 0.0);
}

#[test]
fn diversity_of_offset_copies_is_the_offset() {
    let a = motion(4, 2, |n, j| [n as f64, j as f64, 0.0]);
    let b = motion(4, 2, |n, j| [n as f64 + 1.0, j as f64, 0.0]);
    assert!((motion_distance(&a, &b) - 1.0).abs() < 1e-15);
    assert!((diversity_proxy(&[a.clone(), b], 10, 0).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(diversity_proxy(&[a.clone(), a.clone(), a.clone()], 10, 0).unwrap(), 0.0);
    assert!(diversity_proxy(std::slice::from_ref(&a), 10, 0).is_err());
    assert!(diversity_proxy(&[a.clone(), a], 0, 0).is_err());
}

#[test]
fn diversity_is_seeded() {
    let ms: Vec<_> = (0..5)
        .map(|k| motion(4, 2, move |n, _| [n as f64 * k as f64, 0.0, 0.0]))
        .collect();
    assert_eq!(diversity_proxy(&ms, 7, 3).unwrap(), diversity_proxy(&ms, 7, 3).unwrap());
}

#[test]
fn cross_lists_every_subset_once() {
    let sets = cross_combinations();
    assert_eq!(sets.len(), 63);
    let mut seen = std::collections::HashSet::new();
    for s in &sets {
        let mut sorted = s.clone();
        sorted.sort();
        assert!(seen.insert(sorted));
    }
    assert!(sets.windows(2).all(|w| w[0].len() <= w[1].len()));
    assert_eq!(sets[0], vec![PELVIS]);
    assert_eq!(sets[1], vec![LEFT_FOOT]);
    assert_eq!(sets[6], vec![PELVIS, LEFT_FOOT]);
    assert_eq!(sets[62].len(), 6);
    assert_eq!(sets.iter().filter(|s| s.len() == 3).count(), 20);
}

#[test]
fn density_levels_scale_with_length() {
    assert_eq!(density_levels(64), vec![1, 2, 5, 16, 64]);
    assert_eq!(density_levels(16), vec![1, 2, 5, 4, 16]);
}

#[test]
fn keyframe_control_uses_distinct_ground_truth_frames() {
    let gt = make_dataset(1, 16, 6, 4).unwrap().remove(0).global;
    let mut rng = substream(2, "kc");
    let s = keyframe_control(&gt, &[PELVIS, HEAD], 5, &mut rng).unwrap();
    assert_eq!(s.active_count(), 10);
    for (n, j) in s.active_entries() {
        assert!(j == PELVIS || j == HEAD);
        assert_eq!(s.target(n, j), gt.at(n, j));
    }
    assert!(keyframe_control(&gt, &[PELVIS], 0, &mut rng).is_err());
    assert!(keyframe_control(&gt, &[PELVIS], 17, &mut rng).is_err());
    assert!(keyframe_control(&gt, &[], 1, &mut rng).is_err());
    assert!(keyframe_control(&gt, &[6], 1, &mut rng).is_err());
    let r = random_entries(&gt, 96, &mut rng).unwrap();
    assert_eq!(r.active_count(), 96);
    assert!(random_entries(&gt, 97, &mut rng).is_err());
}

#[test]
fn component_grid_follows_binary_order() {
    let g = component_grid();
    assert_eq!(g.len(), 8);
    assert_eq!(g[0], (false, false, false));
    assert_eq!(g[3], (true, true, false));
    assert_eq!(g[4], (false, false, true));
    assert_eq!(g[7], (true, true, true));
}

#[test]
fn classifier_separates_synthetic_classes() {
    let train = make_dataset(64, 64, 6, 11).unwrap();
    let test = make_dataset(32, 64, 6, 12).unwrap();
    let clf = MotionClassifier::train(&train).unwrap();
    let pairs: Vec<_> = test.iter().map(|s| (s.global.clone(), s.label)).collect();
    let acc = clf.accuracy(&pairs).unwrap();
    assert!(acc > 0.5, "{acc}");
    assert!(MotionClassifier::train(&[]).is_err());
}

struct Tiny {
    cfg: RunConfig,
    tok: TokenizerWeights,
    base: BaseWeights,
    control: ControlWeights,
    heldout: Vec<SyntheticSample>,
}

fn tiny() -> Tiny {
    let mut cfg = RunConfig::default();
    cfg.frames = 16;
    cfg.tokenizer.codebook_size = 8;
    cfg.tokenizer.code_dim = 4;
    cfg.tokenizer.hidden = 8;
    cfg.transformer.layers = 1;
    cfg.transformer.embed = 8;
    cfg.transformer.heads = 2;
    cfg.transformer.ff = 16;
    cfg.schedule.iterations = 2;
    cfg.eval.samples = 3;
    cfg.eval.keyframes = 2;
    cfg.eval.diversity_pairs = 4;
    let tok = TokenizerWeights::init(&cfg.tokenizer, 6, 1);
    let base = BaseWeights::init(&ModelDims::from_config(&cfg), 2);
    let control = ControlWeights::init(&base);
    let heldout = make_dataset(4, 16, 6, 3).unwrap();
    Tiny {
        cfg,
        tok,
        base,
        control,
        heldout,
    }
}

impl Tiny {
    fn evaluator(&self) -> Evaluator<'_> {
        Evaluator {
            cfg: &self.cfg,
            models: Models {
                tokenizer: &self.tok,
                base: &self.base,
                control: Some(&self.control),
            },
            heldout: &self.heldout,
        }
    }
}

fn protocol() -> Protocol {
    Protocol {
        edit: EditConfig::none(),
        use_control: true,
    }
}

#[test]
fn suites_have_the_documented_shape() {
    let t = tiny();
    let ev = t.evaluator();
    let rows = ev.density_sweep(PELVIS, &density_levels(16), &protocol()).unwrap();
    assert_eq!(rows.iter().map(|r| r.density).collect::<Vec<_>>(), vec![1, 2, 5, 4, 16]);
    assert!(rows.iter().all(|r| r.samples == 3 && r.joints == vec!["pelvis"]));
    assert!(ev.density_sweep(PELVIS, &[17], &protocol()).is_err());

    let up = ev.upper_body(&protocol()).unwrap();
    assert_eq!(up.samples, 20);
    assert_eq!(up.joints, vec!["pelvis", "left_foot", "right_foot"]);

    let comp = ev
        .components(&EditConfig {
            code_steps: 2,
            ..EditConfig::fast()
        })
        .unwrap();
    assert_eq!(comp.len(), 8);
    assert_eq!(comp[5].name, "#6 logit=1 code=0 control=1");
}

#[test]
fn rows_are_reproducible() {
    let t = tiny();
    let ev = t.evaluator();
    let mut rng = substream(5, "rows");
    let controls: Vec<_> = t
        .heldout
        .iter()
        .map(|s| random_entries(&s.global, 3, &mut rng).unwrap())
        .collect();
    let a = ev.run_row("r", &[], 3, &controls, &protocol()).unwrap();
    let b = ev.run_row("r", &[], 3, &controls, &protocol()).unwrap();
    assert_eq!(a, b);
    assert!(a.traj_err >= a.loc_err);
    assert!(ev.run_row("r", &[], 3, &[], &protocol()).is_err());
}

#[test]
fn reports_are_written_as_json_and_csv() {
    let t = tiny();
    let dir = tempfile::tempdir().unwrap();
    let row = MetricReport {
        name: "density_1".into(),
        joints: vec!["pelvis".into()],
        density: 1,
        samples: 3,
        traj_err: 0.5,
        loc_err: 0.25,
        avg_err: 0.125,
        foot_skate: 0.0,
        diversity: 1.0,
    };
    write_reports(dir.path(), "density", &t.cfg, &[row]).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("density.json")).unwrap()).unwrap();
    assert_eq!(json["suite"], "density");
    assert_eq!(json["config_hash"], t.cfg.hash());
    assert_eq!(json["rows"][0]["avg_err"], 0.125);
    let mut r = csv::Reader::from_path(dir.path().join("density.csv")).unwrap();
    assert_eq!(&r.headers().unwrap()[4], "Traj. Err.");
    let rec = r.records().next().unwrap().unwrap();
    assert_eq!(&rec[0], "density_1");
    assert_eq!(&rec[6], "0.125000");
}
