//! Run configuration: one TOML file with full schema validation, dotted
//! `key=value` overrides, and a stable hash of the model-defining fields
//! that checkpoints are stamped with.
//!
//! Every field has a default, so an empty file is a valid configuration;
//! unknown keys are rejected rather than ignored, which also catches typos
//! in `--set` override paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datapipe::{exposure_values, AugmentCfg, NoiseCfg};
use crate::error::{Error, Result};
use crate::fusion::ModelCfg;
use crate::losses::LossWeights;
use crate::optim::AdamWConfig;
use crate::perceptual;

/// Network channel widths and depth. These fields (plus the exposure
/// pattern size and gamma) define what a checkpoint is compatible with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub kq_channels: usize,
    pub value_channels: usize,
    pub blend_channels: usize,
    pub bottleneck_channels: usize,
    pub fused_channels: usize,
    pub merge_channels: usize,
    pub merge_blocks: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            kq_channels: 64,
            value_channels: 64,
            blend_channels: 64,
            bottleneck_channels: 128,
            fused_channels: 64,
            merge_channels: 64,
            merge_blocks: 5,
        }
    }
}

/// Optimization and sampling schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCfg {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub crop: usize,
    pub max_steps: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            batch: 8,
            crop: 256,
            max_steps: 1000,
            checkpoint_every: 500,
            log_every: 1,
        }
    }
}

/// Loss weights plus the perceptual extractor's weight file and layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossCfg {
    pub lambda_1: f64,
    pub lambda_per: f64,
    pub lambda_freq: f64,
    pub lambda_temp: f64,
    pub epsilon: f64,
    /// Checkpoint-format archive holding the feature-extractor weights;
    /// required whenever `lambda_per > 0`.
    pub perceptual_weights: Option<PathBuf>,
    pub perceptual_layer: String,
}

impl Default for LossCfg {
    fn default() -> Self {
        let w = LossWeights::default();
        LossCfg {
            lambda_1: w.lambda_1,
            lambda_per: w.lambda_per,
            lambda_freq: w.lambda_freq,
            lambda_temp: w.lambda_temp,
            epsilon: w.epsilon,
            perceptual_weights: None,
            perceptual_layer: "relu4_4".into(),
        }
    }
}

/// Filesystem locations.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsCfg {
    /// Dataset manifest (JSON list of sequences).
    pub manifest: PathBuf,
    /// Root the manifest's relative paths resolve against; defaults to the
    /// manifest's parent directory.
    pub data_root: Option<PathBuf>,
    /// Where checkpoints, logs, and outputs are written.
    pub out_dir: PathBuf,
}

/// The full run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub gamma: f64,
    pub mu: f64,
    pub pattern_size: usize,
    pub stops: f64,
    pub model: ModelDims,
    pub train: TrainCfg,
    pub loss: LossCfg,
    pub augment: AugmentCfg,
    pub noise: NoiseCfg,
    pub paths: PathsCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            gamma: 2.2,
            mu: 5000.0,
            pattern_size: 2,
            stops: 2.0,
            model: ModelDims::default(),
            train: TrainCfg::default(),
            loss: LossCfg::default(),
            augment: AugmentCfg::default(),
            noise: NoiseCfg::default(),
            paths: PathsCfg {
                manifest: PathBuf::new(),
                data_root: None,
                out_dir: PathBuf::from("runs/default"),
            },
        }
    }
}

/// The subset of fields that determine checkpoint compatibility: network
/// topology and the input transform. Training hyper-parameters, loss
/// weights, seeds, and paths deliberately do not participate.
#[derive(Serialize)]
struct HashedView<'a> {
    pattern_size: usize,
    gamma: f64,
    model: &'a ModelDims,
}

impl RunConfig {
    /// Parse TOML text and apply dotted `key=value` overrides on the raw
    /// value tree before deserializing, so overrides face the same schema
    /// checks as the file itself.
    pub fn parse_with_overrides(text: &str, sets: &[String]) -> Result<RunConfig> {
        let mut value: toml::Value = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        for set in sets {
            let (key, raw) = set.split_once('=').ok_or_else(|| {
                Error::Config(format!("override {set:?} must look like key.path=value"))
            })?;
            let leaf: toml::Value = match format!("v = {raw}").parse::<toml::Value>() {
                Ok(toml::Value::Table(t)) => t["v"].clone(),
                _ => toml::Value::String(raw.to_string()),
            };
            let mut node = &mut value;
            let parts: Vec<&str> = key.split('.').collect();
            for part in &parts[..parts.len() - 1] {
                let table = node.as_table_mut().ok_or_else(|| {
                    Error::Config(format!("override key {key:?} descends into a non-table"))
                })?;
                node = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
            let table = node.as_table_mut().ok_or_else(|| {
                Error::Config(format!("override key {key:?} descends into a non-table"))
            })?;
            table.insert(parts[parts.len() - 1].to_string(), leaf);
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("config schema error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, sets: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        RunConfig::parse_with_overrides(&text, sets)
    }

    pub fn validate(&self) -> Result<()> {
        exposure_values(self.pattern_size, self.stops)?;
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        let t = &self.train;
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", t.lr)));
        }
        for (name, b) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        if !(t.eps > 0.0) {
            return Err(Error::Config(format!("optimizer eps must be positive, got {}", t.eps)));
        }
        if t.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay must be ≥ 0, got {}",
                t.weight_decay
            )));
        }
        if t.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if t.checkpoint_every == 0 || t.log_every == 0 {
            return Err(Error::Config("checkpoint_every and log_every must be ≥ 1".into()));
        }
        if t.crop == 0 || t.crop % 4 != 0 {
            return Err(Error::Config(format!(
                "crop size must be a positive multiple of 4, got {}",
                t.crop
            )));
        }
        let m = &self.model;
        for (name, v) in [
            ("kq_channels", m.kq_channels),
            ("value_channels", m.value_channels),
            ("blend_channels", m.blend_channels),
            ("bottleneck_channels", m.bottleneck_channels),
            ("fused_channels", m.fused_channels),
            ("merge_channels", m.merge_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be ≥ 1")));
            }
        }
        self.loss_weights().validate()?;
        let (stage, _) = perceptual::parse_layer(&self.loss.perceptual_layer)?;
        if self.loss.lambda_per > 0.0 {
            let divisor = 1usize << (stage - 1);
            if t.crop % divisor != 0 {
                return Err(Error::Config(format!(
                    "crop {} must be divisible by {divisor} for perceptual layer {} \
                     (set loss.lambda_per = 0 or adjust train.crop)",
                    t.crop, self.loss.perceptual_layer
                )));
            }
        }
        if let Some((lo, hi)) = self.augment.gain_jitter {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::Config(format!(
                    "augment.gain_jitter must be an ordered positive range, got ({lo}, {hi})"
                )));
            }
        }
        if self.noise.shot < 0.0 || self.noise.read < 0.0 {
            return Err(Error::Config("noise terms must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn model_cfg(&self) -> ModelCfg {
        ModelCfg {
            kq_channels: self.model.kq_channels,
            value_channels: self.model.value_channels,
            blend_channels: self.model.blend_channels,
            bottleneck_channels: self.model.bottleneck_channels,
            fused_channels: self.model.fused_channels,
            merge_channels: self.model.merge_channels,
            merge_blocks: self.model.merge_blocks,
            frames: 2 * self.pattern_size + 1,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_1: self.loss.lambda_1,
            lambda_per: self.loss.lambda_per,
            lambda_freq: self.loss.lambda_freq,
            lambda_temp: self.loss.lambda_temp,
            epsilon: self.loss.epsilon,
        }
    }

    pub fn adamw_cfg(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.eps,
            weight_decay: self.train.weight_decay,
        }
    }

    /// Root that manifest-relative paths resolve against.
    pub fn data_root(&self) -> PathBuf {
        match &self.paths.data_root {
            Some(r) => r.clone(),
            None => self
                .paths
                .manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from(".")),
        }
    }

    /// SHA-256 over the canonical TOML rendering of the model-defining
    /// fields. Checkpoints carry this value; loading rejects mismatches.
    pub fn config_hash(&self) -> [u8; 32] {
        let view = HashedView {
            pattern_size: self.pattern_size,
            gamma: self.gamma,
            model: &self.model,
        };
        let text = toml::to_string(&view).expect("hash view serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        h.finalize().into()
    }
}
