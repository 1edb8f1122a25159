//! Dataset splits, training stages, and the on-disk layout of a run.

use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::kinematics::{extract_features, make_dataset, LabelledMotion, MotionFeatures, SyntheticSample};
use crate::maskmodel::{train_base, train_control, BaseWeights, ControlWeights, ModelDims, TokenExample};
use crate::pipeline::Models;
use crate::tokenizer::{train_tokenizer, TokenizerWeights};

const HELDOUT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn train_set(cfg: &RunConfig) -> Result<Vec<SyntheticSample>> {
    make_dataset(cfg.dataset.train_size, cfg.frames, cfg.skeleton.joints, cfg.seed)
}

pub fn heldout_set(cfg: &RunConfig) -> Result<Vec<SyntheticSample>> {
    make_dataset(
        cfg.dataset.heldout_size,
        cfg.frames,
        cfg.skeleton.joints,
        cfg.seed ^ HELDOUT_SALT,
    )
}

/// File locations under a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn tokenizer(&self) -> PathBuf {
        self.root.join("checkpoints/tokenizer")
    }

    pub fn base(&self) -> PathBuf {
        self.root.join("checkpoints/base")
    }

    pub fn control(&self) -> PathBuf {
        self.root.join("checkpoints/control")
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data/train.jsonl")
    }

    pub fn heldout_data(&self) -> PathBuf {
        self.root.join("data/heldout.jsonl")
    }

    pub fn loss_curve(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("logs/{}_loss.csv", stage.name()))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn outputs(&self) -> PathBuf {
        self.root.join("outputs")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Tokenizer,
    Base,
    Control,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Tokenizer => "tokenizer",
            Stage::Base => "base",
            Stage::Control => "control",
        }
    }
}

fn require(stem: &Path) -> Result<()> {
    let json = stem.with_extension("json");
    if json.exists() {
        Ok(())
    } else {
        Err(Error::Missing(format!("{} (train that stage first)", json.display())))
    }
}

pub fn load_tokenizer(paths: &RunPaths) -> Result<TokenizerWeights> {
    require(&paths.tokenizer())?;
    checkpoint::load_tokenizer(paths.tokenizer())
}

pub fn load_base(paths: &RunPaths) -> Result<BaseWeights> {
    require(&paths.base())?;
    checkpoint::load_base(paths.base())
}

pub fn load_control(paths: &RunPaths) -> Result<ControlWeights> {
    require(&paths.control())?;
    checkpoint::load_control(paths.control())
}

/// All three trained stages of a run.
pub struct Trained {
    pub tokenizer: TokenizerWeights,
    pub base: BaseWeights,
    pub control: ControlWeights,
}

impl Trained {
    pub fn load(paths: &RunPaths) -> Result<Self> {
        Ok(Self {
            tokenizer: load_tokenizer(paths)?,
            base: load_base(paths)?,
            control: load_control(paths)?,
        })
    }

    pub fn models(&self) -> Models<'_> {
        Models {
            tokenizer: &self.tokenizer,
            base: &self.base,
            control: Some(&self.control),
        }
    }
}

/// Training motions: the file when given, else the configured synthetic set.
pub fn training_motions(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<(MotionFeatures, LabelledMotion)>> {
    match data {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Missing(path.display().to_string()));
            }
            crate::kinematics::read_motions(path)?
                .into_iter()
                .map(|m| Ok((extract_features(&m.global)?, m)))
                .collect()
        }
        None => Ok(train_set(cfg)?
            .iter()
            .map(|s| (s.features.clone(), LabelledMotion::from(s)))
            .collect()),
    }
}

pub fn token_examples(
    motions: &[(MotionFeatures, LabelledMotion)],
    tok: &TokenizerWeights,
) -> Result<Vec<TokenExample>> {
    let refs: Vec<&MotionFeatures> = motions.iter().map(|(f, _)| f).collect();
    let tokens = tok.tokenize_all(&refs)?;
    Ok(motions
        .iter()
        .zip(tokens)
        .map(|((_, m), tokens)| TokenExample {
            tokens,
            label: m.label,
            global: m.global.clone(),
        })
        .collect())
}

fn write_curve(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec!["epoch"];
    head.extend_from_slice(header);
    w.write_record(&head)?;
    for (i, r) in rows.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(r.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn columns(cols: &[&Vec<f64>]) -> Vec<Vec<f64>> {
    (0..cols[0].len())
        .map(|i| cols.iter().map(|c| c[i]).collect())
        .collect()
}

/// Trains one stage, writes its checkpoint and loss curve, and returns the
/// curve's path. Earlier stages must already be on disk.
pub fn train_stage(cfg: &RunConfig, paths: &RunPaths, stage: Stage, data: Option<&Path>) -> Result<PathBuf> {
    let curve = paths.loss_curve(stage);
    match stage {
        Stage::Tokenizer => {
            let motions = training_motions(cfg, data)?;
            let feats: Vec<MotionFeatures> = motions.into_iter().map(|(f, _)| f).collect();
            let (w, log) = train_tokenizer(&feats, &cfg.tokenizer, cfg.seed)?;
            checkpoint::save_tokenizer(paths.tokenizer(), &w, cfg.seed)?;
            write_curve(
                &curve,
                &["loss", "recon"],
                &columns(&[&log.epoch_loss, &log.epoch_recon]),
            )?;
        }
        Stage::Base => {
            let tok = load_tokenizer(paths)?;
            let examples = token_examples(&training_motions(cfg, data)?, &tok)?;
            let dims = ModelDims::from_config(cfg);
            let (w, log) = train_base(&examples, &tok, &dims, &cfg.transformer, cfg.seed)?;
            checkpoint::save_base(paths.base(), &w, cfg.seed)?;
            write_curve(
                &curve,
                &["loss", "nll", "residual"],
                &columns(&[&log.epoch_loss, &log.epoch_nll, &log.epoch_aux]),
            )?;
        }
        Stage::Control => {
            let tok = load_tokenizer(paths)?;
            let base = load_base(paths)?;
            let examples = token_examples(&training_motions(cfg, data)?, &tok)?;
            let (w, log) = train_control(&examples, &base, &tok, &cfg.control, cfg.seed)?;
            checkpoint::save_control(paths.control(), &w, cfg.seed)?;
            write_curve(
                &curve,
                &["loss", "nll", "consistency"],
                &columns(&[&log.epoch_loss, &log.epoch_nll, &log.epoch_aux]),
            )?;
        }
    }
    Ok(curve)
}
