use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "frames=16",
    "dataset.train_size=16",
    "dataset.heldout_size=4",
    "tokenizer.codebook_size=8",
    "tokenizer.code_dim=4",
    "tokenizer.hidden=8",
    "tokenizer.epochs=1",
    "transformer.layers=1",
    "transformer.embed=8",
    "transformer.heads=2",
    "transformer.ff=16",
    "transformer.epochs=1",
    "control.epochs=1",
    "schedule.iterations=2",
    "eval.samples=2",
    "eval.keyframes=2",
    "eval.diversity_pairs=2",
];

fn run(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_maskmotion"));
    cmd.arg("--out-dir").arg(out);
    for s in TINY {
        cmd.args(["--set", s]);
    }
    cmd.args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn config_prints_the_effective_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--seed", "5", "config"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 5);
    assert_eq!(v["frames"], 16);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["--set", "nope=1", "config"])), 1);
    assert_eq!(code(&run(dir.path(), &["--set", "frames", "config"])), 1);
    assert_eq!(code(&run(dir.path(), &["--set", "frames=15", "config"])), 1);
    assert_eq!(code(&run(dir.path(), &["eval", "bogus"])), 1);
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
}

#[test]
fn missing_artifacts_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["generate", "--label", "0"])), 3);
    assert_eq!(code(&run(dir.path(), &["train", "base"])), 3);
    assert_eq!(code(&run(dir.path(), &["--config", "/nonexistent.json", "config"])), 3);
    assert_eq!(code(&run(dir.path(), &["eval", "density"])), 3);
}

#[test]
fn train_generate_and_evaluate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let ok = |args: &[&str]| {
        let o = run(root, args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    ok(&["data"]);
    assert!(root.join("data/train.jsonl").exists());
    ok(&[
        "train",
        "tokenizer",
        "--data",
        root.join("data/train.jsonl").to_str().unwrap(),
    ]);
    ok(&["train", "base"]);
    ok(&["train", "control"]);
    for stage in ["tokenizer", "base", "control"] {
        assert!(root.join(format!("checkpoints/{stage}.json")).exists());
        let mut r = csv::Reader::from_path(root.join(format!("logs/{stage}_loss.csv"))).unwrap();
        assert_eq!(&r.headers().unwrap()[0], "epoch");
    }

    let control = root.join("c.json");
    std::fs::write(&control, r#"[{"joint":"pelvis","frame":8,"target":[0.2,0.9,0.3]}]"#).unwrap();
    let obstacles = root.join("o.json");
    std::fs::write(
        &obstacles,
        r#"[{"centers":[[0,0.9,2]],"radius":0.3,"safe_distance":0.1}]"#,
    )
    .unwrap();
    ok(&[
        "generate",
        "--label",
        "walk-straight",
        "--control",
        control.to_str().unwrap(),
        "--obstacles",
        obstacles.to_str().unwrap(),
        "--trace",
        "--name",
        "demo",
    ]);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("outputs/demo_metrics.json")).unwrap()).unwrap();
    assert_eq!(m["frames"], 16);
    assert!(m["keyframe_errors"]["avg_err"].is_number());
    assert!(m["obstacles"]["min_sdf"].is_number());
    assert!(root.join("outputs/demo.jsonl").exists());
    assert!(root.join("outputs/demo_confidence_before.csv").exists());
    assert!(root.join("outputs/demo_code_loss.csv").exists());

    let first = std::fs::read(root.join("outputs/demo.jsonl")).unwrap();
    ok(&[
        "generate",
        "--label",
        "walk-straight",
        "--control",
        control.to_str().unwrap(),
        "--obstacles",
        obstacles.to_str().unwrap(),
        "--name",
        "demo",
    ]);
    assert_eq!(std::fs::read(root.join("outputs/demo.jsonl")).unwrap(), first);

    assert_eq!(code(&run(root, &["generate", "--label", "flying"])), 1);
    assert_eq!(code(&run(root, &["generate", "--label", "0", "--length", "15"])), 1);

    ok(&["eval", "density", "--profile", "fast"]);
    let mut r = csv::Reader::from_path(root.join("reports/density.csv")).unwrap();
    assert_eq!(r.records().count(), 5);
    ok(&["eval", "components", "--profile", "fast"]);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("reports/components.json")).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 8);
    ok(&["eval", "quality"]);
    assert!(root.join("reports/quality.json").exists());
}
