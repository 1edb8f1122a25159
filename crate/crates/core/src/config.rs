//! Run configuration: one self-describing JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kinematics::JOINT_NAMES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonConfig {
    pub joints: usize,
    pub names: Vec<String>,
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        Self {
            joints: JOINT_NAMES.len(),
            names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_size: usize,
    pub heldout_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_size: 512,
            heldout_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    pub levels: usize,
    pub beta: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            code_dim: 32,
            levels: 2,
            beta: 0.25,
            hidden: 64,
            epochs: 40,
            batch_size: 16,
            lr: 3e-3,
            warmup: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub embed: usize,
    pub heads: usize,
    pub ff: usize,
    pub label_dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            embed: 64,
            heads: 4,
            ff: 128,
            label_dropout: 0.1,
            epochs: 100,
            batch_size: 32,
            lr: 2e-3,
            warmup: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlTrainConfig {
    /// Weight of the masked NLL against the consistency loss.
    pub alpha: f64,
    pub label_dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub temperature: f64,
}

impl Default for ControlTrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            label_dropout: 0.1,
            epochs: 60,
            batch_size: 16,
            lr: 2e-3,
            warmup: 50,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub iterations: usize,
    pub temperature: f64,
    pub residual_temperature: f64,
    pub cfg_base: f64,
    pub cfg_residual: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            temperature: 1.0,
            residual_temperature: 1e-8,
            cfg_base: 4.0,
            cfg_residual: 5.0,
        }
    }
}

/// Step sizes and step counts for inference-time editing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    pub logit_lr: f64,
    /// Logit-editing steps run inside *each* generation iteration.
    pub logit_steps: usize,
    pub code_lr: f64,
    /// Codebook-editing steps run once after the final iteration.
    pub code_steps: usize,
    pub temperature: f64,
    /// Weight of the obstacle term relative to the consistency loss.
    pub obstacle_weight: f64,
}

impl EditConfig {
    pub fn none() -> Self {
        Self {
            logit_steps: 0,
            code_steps: 0,
            ..Self::fast()
        }
    }

    pub fn fast() -> Self {
        Self {
            logit_lr: 15.0,
            logit_steps: 0,
            code_lr: 0.006,
            code_steps: 100,
            temperature: 1.0,
            obstacle_weight: 1.0,
        }
    }

    pub fn medium() -> Self {
        Self {
            code_steps: 600,
            ..Self::fast()
        }
    }

    /// 600 logit steps in total over 10 iterations plus 1200 codebook steps.
    pub fn accurate() -> Self {
        Self {
            logit_steps: 60,
            code_steps: 1200,
            ..Self::fast()
        }
    }

    pub fn total_logit_steps(&self, iterations: usize) -> usize {
        self.logit_steps * iterations
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.logit_lr >= 0.0 && self.code_lr >= 0.0) {
            return Err(Error::Config("edit step sizes must be non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("edit temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profiles {
    pub fast: EditConfig,
    pub medium: EditConfig,
    pub accurate: EditConfig,
}

impl Default for Profiles {
    fn default() -> Self {
        Self {
            fast: EditConfig::fast(),
            medium: EditConfig::medium(),
            accurate: EditConfig::accurate(),
        }
    }
}

impl Profiles {
    pub fn get(&self, name: &str) -> Result<&EditConfig> {
        match name {
            "fast" => Ok(&self.fast),
            "medium" => Ok(&self.medium),
            "accurate" => Ok(&self.accurate),
            other => Err(Error::Config(format!(
                "unknown profile '{other}' (expected fast, medium, or accurate)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub height_eps: f64,
    pub slide_eps: f64,
    pub samples: usize,
    pub keyframes: usize,
    pub diversity_pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            height_eps: 0.05,
            slide_eps: 0.025,
            samples: 20,
            keyframes: 5,
            diversity_pairs: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub frames: usize,
    pub skeleton: SkeletonConfig,
    pub dataset: DatasetConfig,
    pub tokenizer: TokenizerConfig,
    pub transformer: TransformerConfig,
    pub control: ControlTrainConfig,
    pub schedule: ScheduleConfig,
    pub profiles: Profiles,
    pub eval: EvalConfig,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            frames: 64,
            skeleton: SkeletonConfig::default(),
            dataset: DatasetConfig::default(),
            tokenizer: TokenizerConfig::default(),
            transformer: TransformerConfig::default(),
            control: ControlTrainConfig::default(),
            schedule: ScheduleConfig::default(),
            profiles: Profiles::default(),
            eval: EvalConfig::default(),
            out_dir: "runs/default".into(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames < 4 || !self.frames.is_multiple_of(4) {
            return bad(format!("frames {} must be a positive multiple of 4", self.frames));
        }
        if self.skeleton.joints < 2 || self.skeleton.names.len() != self.skeleton.joints {
            return bad("skeleton names must list every joint (at least 2)".into());
        }
        let t = &self.tokenizer;
        if t.codebook_size == 0 || t.code_dim == 0 || t.levels == 0 {
            return bad("tokenizer sizes must be positive".into());
        }
        let m = &self.transformer;
        if m.heads == 0 || !m.embed.is_multiple_of(m.heads) {
            return bad(format!("embed {} not divisible by heads {}", m.embed, m.heads));
        }
        if !(0.0..=1.0).contains(&self.control.alpha) {
            return bad("alpha must lie in [0, 1]".into());
        }
        if self.schedule.iterations == 0 {
            return bad("at least one generation iteration is required".into());
        }
        for p in [&self.profiles.fast, &self.profiles.medium, &self.profiles.accurate] {
            p.validate()?;
        }
        Ok(())
    }
}
