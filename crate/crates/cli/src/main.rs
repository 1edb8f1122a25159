use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use maskmotion::config::RunConfig;
use maskmotion::editctl::Obstacle;
use maskmotion::eval::{self, Evaluator, Protocol};
use maskmotion::kinematics::{joint_index, write_motions, LabelledMotion, CLASS_NAMES};
use maskmotion::pipeline::{self, GenerationRequest, GenerationResult, TimelinePrompt};
use maskmotion::workflow::{self, RunPaths, Stage, Trained};
use maskmotion::Error;

#[derive(Parser)]
#[command(
    name = "maskmotion",
    version,
    about = "Masked motion generation with spatial control"
)]
struct Cli {
    /// Run configuration (JSON); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set transformer.epochs=20`.
    #[arg(long = "set", global = true, value_name = "KEY=JSON")]
    overrides: Vec<String>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Write the synthetic training and held-out sets as motion JSONL.
    Data,
    /// Train one stage and write its checkpoint.
    Train {
        #[arg(value_enum)]
        stage: StageArg,
        /// Motion JSONL to train on instead of the synthetic set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate one motion.
    Generate(GenerateArgs),
    /// Run an evaluation suite.
    Eval {
        suite: String,
        #[arg(long, value_enum, default_value_t = ProfileArg::Accurate)]
        profile: ProfileArg,
        /// Joint controlled by the density suite.
        #[arg(long, default_value = "pelvis")]
        joint: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Tokenizer,
    Base,
    Control,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Fast,
    Medium,
    Accurate,
}

impl ProfileArg {
    fn name(self) -> &'static str {
        match self {
            ProfileArg::Fast => "fast",
            ProfileArg::Medium => "medium",
            ProfileArg::Accurate => "accurate",
        }
    }
}

#[derive(clap::Args)]
struct GenerateArgs {
    /// Class name or index.
    #[arg(long)]
    label: String,
    /// Frames (multiple of 4).
    #[arg(long)]
    length: Option<usize>,
    #[arg(long, value_enum, default_value_t = ProfileArg::Fast)]
    profile: ProfileArg,
    /// JSON array of `{"joint", "frame", "target"}` entries.
    #[arg(long)]
    control: Option<PathBuf>,
    /// JSON array of sphere obstacles.
    #[arg(long)]
    obstacles: Option<PathBuf>,
    /// Joints repelled from obstacles.
    #[arg(long, value_delimiter = ',', default_value = "pelvis")]
    avoid_joints: Vec<String>,
    /// JSON `{"base_label", "prompts": [...]}` for body-part timelines.
    #[arg(long)]
    timeline: Option<PathBuf>,
    /// Also write confidence traces and edit-loss curves.
    #[arg(long)]
    trace: bool,
    /// Output file stem inside the run's outputs directory.
    #[arg(long, default_value = "sample")]
    name: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TimelineFile {
    base_label: String,
    prompts: Vec<TimelinePromptFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TimelinePromptFile {
    label: String,
    joints: Vec<String>,
    start: usize,
    end: usize,
}

fn set_key(root: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!(Error::Config(format!("override '{assignment}' is not KEY=VALUE"))))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in key.split('.') {
        node = node
            .get_mut(part)
            .ok_or_else(|| anyhow!(Error::Config(format!("unknown config key '{key}'"))))?;
    }
    *node = value;
    Ok(())
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Missing(p.display().to_string()).into());
            }
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if !cli.overrides.is_empty() {
        let mut v = serde_json::to_value(&cfg)?;
        for o in &cli.overrides {
            set_key(&mut v, o)?;
        }
        cfg = RunConfig::from_json(&v.to_string())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_label(s: &str) -> anyhow::Result<usize> {
    if let Ok(i) = s.parse::<usize>() {
        if i < CLASS_NAMES.len() {
            return Ok(i);
        }
    }
    CLASS_NAMES.iter().position(|&c| c == s).ok_or_else(|| {
        anyhow!(Error::Invalid(format!(
            "unknown label '{s}' (expected one of {})",
            CLASS_NAMES.join(", ")
        )))
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    if !path.exists() {
        return Err(Error::Missing(path.display().to_string()).into());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())).into())
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn check_finite(r: &GenerationResult) -> anyhow::Result<()> {
    if !r.motion.array().is_finite() {
        return Err(Error::Numeric {
            stage: "generate",
            step: 0,
            detail: "non-finite motion".into(),
        }
        .into());
    }
    Ok(())
}

fn cmd_generate(cfg: &RunConfig, paths: &RunPaths, args: &GenerateArgs) -> anyhow::Result<()> {
    let trained = Trained::load(paths)?;
    let models = trained.models();
    let label = parse_label(&args.label)?;
    let mut req = GenerationRequest::new(cfg, Some(label), cfg.seed);
    req.frames = args.length.unwrap_or(cfg.frames);
    req.edit = cfg.profiles.get(args.profile.name())?.clone();
    req.trace = args.trace;
    let joints = cfg.skeleton.joints;
    if let Some(p) = &args.control {
        if !p.exists() {
            return Err(Error::Missing(p.display().to_string()).into());
        }
        req.spatial = Some(pipeline::read_control_file(p, req.frames, joints)?);
    }
    if let Some(p) = &args.obstacles {
        let obstacles: Vec<Obstacle> = read_json(p)?;
        for (i, o) in obstacles.iter().enumerate() {
            o.validate().map_err(|e| Error::Invalid(format!("obstacle {i}: {e}")))?;
        }
        let mut sel = vec![0.0; req.frames * joints];
        for name in &args.avoid_joints {
            let j = joint_index(name)
                .filter(|&j| j < joints)
                .ok_or_else(|| Error::Invalid(format!("unknown joint '{name}'")))?;
            for n in 0..req.frames {
                sel[n * joints + j] = 1.0;
            }
        }
        req.obstacles = obstacles;
        req.obstacle_selector = Some(diffcore::Array::new(vec![req.frames, joints], sel)?);
    }
    let result = match &args.timeline {
        Some(p) => {
            let file: TimelineFile = read_json(p)?;
            let prompts = file
                .prompts
                .iter()
                .map(|t| {
                    Ok(TimelinePrompt {
                        label: parse_label(&t.label)?,
                        joints: t.joints.clone(),
                        start: t.start,
                        end: t.end,
                    })
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            pipeline::timeline(&prompts, parse_label(&file.base_label)?, &req, &models)?
        }
        None => pipeline::generate(&req, &models)?,
    };
    check_finite(&result)?;

    let out = paths.outputs();
    std::fs::create_dir_all(&out)?;
    let motion_path = out.join(format!("{}.jsonl", args.name));
    write_motions(
        &motion_path,
        &[LabelledMotion {
            label,
            text_tag: CLASS_NAMES[label].to_string(),
            global: result.motion.clone(),
        }],
    )?;
    let mut metrics = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "label": CLASS_NAMES[label],
        "frames": req.frames,
        "profile": args.profile.name(),
        "foot_skate": eval::foot_skate(&result.motion, cfg.eval.height_eps, cfg.eval.slide_eps),
        "tokens": result.tokens.level(0),
    });
    if let Some(s) = req.spatial.as_ref().filter(|s| s.active_count() > 0) {
        metrics["keyframe_errors"] =
            serde_json::to_value(eval::keyframe_errors(&result.motion, s, cfg.eval.threshold)?)?;
    }
    if let Some(r) = &result.obstacle_report {
        metrics["obstacles"] = serde_json::to_value(r)?;
    }
    if let Some(tr) = result.code_trace.first().zip(result.code_trace.last()) {
        metrics["codebook_edit_loss"] = json!({"initial": tr.0, "final": tr.1});
    }
    let metrics_path = out.join(format!("{}_metrics.json", args.name));
    write_file(&metrics_path, &serde_json::to_string_pretty(&metrics)?)?;
    println!("{}", motion_path.display());
    println!("{}", metrics_path.display());
    if args.trace {
        let before = out.join(format!("{}_confidence_before.csv", args.name));
        let after = out.join(format!("{}_confidence_after.csv", args.name));
        pipeline::write_confidence_trace(&result, &before, &after)?;
        println!("{}", before.display());
        println!("{}", after.display());
        // Logit traces of all iterations back to back.
        let logit: Vec<f64> = result.logit_traces.concat();
        for (suffix, trace) in [("logit_loss", &logit), ("code_loss", &result.code_trace)] {
            if !trace.is_empty() {
                let path = out.join(format!("{}_{suffix}.csv", args.name));
                maskmotion::editctl::write_loss_trace(&path, trace)?;
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

const SUITES: [&str; 5] = ["density", "cross", "upperbody", "components", "quality"];

fn cmd_eval(cfg: &RunConfig, paths: &RunPaths, suite: &str, profile: ProfileArg, joint: &str) -> anyhow::Result<()> {
    if !SUITES.contains(&suite) {
        return Err(Error::Invalid(format!("unknown suite '{suite}' (valid: {})", SUITES.join(", "))).into());
    }
    let trained = Trained::load(paths)?;
    let heldout = workflow::heldout_set(cfg)?;
    let ev = Evaluator {
        cfg,
        models: trained.models(),
        heldout: &heldout,
    };
    let edit = cfg.profiles.get(profile.name())?.clone();
    let p = Protocol {
        edit: edit.clone(),
        use_control: true,
    };
    let dir = paths.reports();
    if suite == "quality" {
        let q = eval::quality(&ev, &workflow::train_set(cfg)?)?;
        eval::write_quality(&dir, cfg, &q)?;
        println!("{}", serde_json::to_string_pretty(&q)?);
        return Ok(());
    }
    let rows = match suite {
        "density" => {
            let j = joint_index(joint).ok_or_else(|| Error::Invalid(format!("unknown joint '{joint}'")))?;
            ev.density_sweep(j, &eval::density_levels(cfg.frames), &p)?
        }
        "cross" => ev.cross(&p)?,
        "upperbody" => vec![ev.upper_body(&p)?],
        _ => ev.components(&edit)?,
    };
    eval::write_reports(&dir, suite, cfg, &rows)?;
    println!("{:<40} {:>8} {:>8} {:>8} {:>8}", "row", "traj", "loc", "avg", "skate");
    for r in &rows {
        println!(
            "{:<40} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.name, r.traj_err, r.loc_err, r.avg_err, r.foot_skate
        );
    }
    println!("{}", dir.join(format!("{suite}.json")).display());
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    let paths = RunPaths::new(&cfg.out_dir);
    match &cli.command {
        Command::Config => println!("{}", cfg.to_json()),
        Command::Data => {
            for (path, set) in [
                (paths.train_data(), workflow::train_set(&cfg)?),
                (paths.heldout_data(), workflow::heldout_set(&cfg)?),
            ] {
                std::fs::create_dir_all(path.parent().expect("data dir"))?;
                let motions: Vec<LabelledMotion> = set.iter().map(LabelledMotion::from).collect();
                write_motions(&path, &motions)?;
                println!("{}", path.display());
            }
        }
        Command::Train { stage, data } => {
            let stage = match stage {
                StageArg::Tokenizer => Stage::Tokenizer,
                StageArg::Base => Stage::Base,
                StageArg::Control => Stage::Control,
            };
            let curve = workflow::train_stage(&cfg, &paths, stage, data.as_deref())?;
            println!("{}", curve.display());
        }
        Command::Generate(args) => cmd_generate(&cfg, &paths, args)?,
        Command::Eval { suite, profile, joint } => cmd_eval(&cfg, &paths, suite, *profile, joint)?,
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Numeric { .. } => 2,
                Error::Diff(diffcore::Error::NonFinite { .. }) => 2,
                Error::Missing(_) => 3,
                Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
