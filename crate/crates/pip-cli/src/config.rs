//! JSON run configuration: five required sections, strict unknown-key
//! rejection, and a documented default for every leaf field.
//!
//! The minimal valid document spells out all five sections and nothing
//! else: `{"model":{},"pip":[],"train":{},"data":{},"paths":{}}`. Leaving
//! out a section is an error that names it, so a truncated config can
//! never silently fall back to defaults; leaving out a leaf field uses
//! the default listed on its struct field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pip_restore::backbone::PipOverride;
use pip_restore::degrade::TaskSet;
use pip_restore::trainer::TrainConfig;
use pip_restore::{Error, Result};

// ── sections ──

/// Restoration-network shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Resolution levels including the bottleneck (default 3).
    pub levels: usize,
    /// Channels at the finest level (default 16).
    pub base_channels: usize,
    /// Residual blocks per level (default 1).
    pub blocks_per_level: usize,
    /// Prompt grid side at the finest skip (default 16).
    pub prompt_spatial: usize,
    /// Prompt wiring variant, one of "a".."e" (default "e").
    pub ablation: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            levels: 3,
            base_channels: 16,
            blocks_per_level: 1,
            prompt_spatial: 16,
            ablation: "e".to_string(),
        }
    }
}

/// Optional per-skip prompt tweaks; the list must be empty (derived
/// defaults everywhere) or have exactly one entry per skip.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipSection {
    /// Top-m ratio list for the sparsified feature attention
    /// (default: derived {1/2, 2/3, 3/4, 4/5}).
    pub m_ratios: Option<Vec<f64>>,
    /// Hidden-width multiplier of the gated feed-forward (default: derived 2).
    pub expansion: Option<usize>,
}

/// Optimization schedule and loss weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Prompt-spread loss weight (default 0.002).
    pub alpha: f64,
    /// Target pairwise prompt angle in degrees (default 90).
    pub theta_thre_deg: f64,
    /// Peak learning rate (default 1e-3).
    pub lr_peak: f64,
    /// Warmup epochs (default 1).
    pub warmup_epochs: usize,
    /// Total epochs (default 10).
    pub total_epochs: usize,
    /// Optimizer steps per epoch (default 200).
    pub steps_per_epoch: usize,
    /// Samples per step (default 8).
    pub batch_size: usize,
    /// Adam first-moment decay (default 0.9).
    pub beta1: f64,
    /// Adam second-moment decay (default 0.99).
    pub beta2: f64,
    /// Adam denominator stabilizer (default 1e-8).
    pub adam_eps: f64,
    /// Mix half-images across each batch (default false).
    pub dmix: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            alpha: 0.002,
            theta_thre_deg: 90.0,
            lr_peak: 1e-3,
            warmup_epochs: 1,
            total_epochs: 10,
            steps_per_epoch: 200,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            dmix: false,
        }
    }
}

/// What the run trains on.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Task names in order (default ["noise", "rain", "lowlight"]).
    pub tasks: Vec<String>,
    /// Square training-image side (default 64).
    pub image_size: usize,
    /// Base seed for the whole run (default 7).
    pub seed: u64,
    /// Held-out validation images per task (default 6).
    pub val_per_task: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            tasks: vec!["noise".into(), "rain".into(), "lowlight".into()],
            image_size: 64,
            seed: 7,
            val_per_task: 6,
        }
    }
}

/// Where the run writes its artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Checkpoint directory (default "checkpoints").
    pub checkpoint_dir: PathBuf,
    /// Log directory (default "logs").
    pub log_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { checkpoint_dir: "checkpoints".into(), log_dir: "logs".into() }
    }
}

// ── the document ──

/// The full run configuration. All five sections are required; every leaf
/// field inside them has a default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub pip: Vec<PipSection>,
    pub train: TrainSection,
    pub data: DataSection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Parse a JSON document, rejecting unknown keys and naming the
    /// offending field in the error.
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Read and parse a config file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("config {}: {e}", path.display()))
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Effective seed under the documented precedence: `--seed` flag over
    /// `PIP_SEED` over the config value.
    pub fn effective_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        match std::env::var("PIP_SEED") {
            Ok(v) => v
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("PIP_SEED must be an unsigned integer, got {v:?}"))),
            Err(_) => Ok(self.data.seed),
        }
    }

    /// Translate into the trainer's configuration, applying the seed
    /// precedence and validating everything.
    pub fn resolve(&self, seed_flag: Option<u64>) -> Result<TrainConfig> {
        let ablation = single_letter(&self.model.ablation)?;
        let tasks = TaskSet::parse(&self.data.tasks.join(","))?;
        let mut cfg = TrainConfig::desk(tasks);
        cfg.image_size = self.data.image_size;
        cfg.levels = self.model.levels;
        cfg.base_channels = self.model.base_channels;
        cfg.blocks_per_level = self.model.blocks_per_level;
        cfg.prompt_spatial = self.model.prompt_spatial;
        cfg.ablation = ablation;
        cfg.pip_overrides = self
            .pip
            .iter()
            .map(|p| PipOverride { m_ratios: p.m_ratios.clone(), expansion: p.expansion })
            .collect();
        cfg.alpha = self.train.alpha;
        cfg.theta_thre = self.train.theta_thre_deg.to_radians();
        cfg.lr_peak = self.train.lr_peak;
        cfg.warmup_epochs = self.train.warmup_epochs;
        cfg.total_epochs = self.train.total_epochs;
        cfg.steps_per_epoch = self.train.steps_per_epoch;
        cfg.batch_size = self.train.batch_size;
        cfg.beta1 = self.train.beta1;
        cfg.beta2 = self.train.beta2;
        cfg.adam_eps = self.train.adam_eps;
        cfg.dmix_enabled = self.train.dmix;
        cfg.seed = self.effective_seed(seed_flag)?;
        cfg.val_per_task = self.data.val_per_task;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The document with every field made concrete: the effective seed
    /// substituted and the `pip` list expanded to one fully-specified
    /// entry per skip. This is what the run log echoes.
    pub fn resolved_echo(&self, seed_flag: Option<u64>) -> Result<RunConfig> {
        let cfg = self.resolve(seed_flag)?;
        let mut echo = self.clone();
        echo.data.seed = cfg.seed;
        echo.pip = cfg
            .unet_config()
            .pip_configs()?
            .into_iter()
            .map(|pc| PipSection { m_ratios: Some(pc.m_ratios), expansion: Some(pc.expansion) })
            .collect();
        Ok(echo)
    }
}

fn single_letter(s: &str) -> Result<char> {
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => Ok(c),
        _ => Err(Error::Config(format!(
            "model.ablation must be a single letter a-e, got {s:?}"
        ))),
    }
}
