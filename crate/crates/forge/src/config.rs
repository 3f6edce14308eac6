//! Pipeline configuration in TOML. Unknown keys are rejected; omitted keys
//! take the library defaults.

use std::path::{Path, PathBuf};

use acdnet_core::compress::{DistillConfig, DistillLoss, PruneConfig, PruneMethod, RetrainMode};
use acdnet_core::init::derive_seed;
use acdnet_core::model::DenseRewire;
use acdnet_core::train::{CropStride, TrainConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: Box<toml::de::Error> },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub quant: QuantSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "source", rename_all = "kebab-case")]
pub enum DataSection {
    /// Band-limited noise classes.
    Synthetic {
        n_cls: usize,
        clips_per_class: usize,
        sr: usize,
        len: usize,
        #[serde(default)]
        dataset_seed: u64,
        #[serde(default = "one")]
        test_fold: usize,
    },
    /// `path,label,fold` CSV; relative paths resolve against the CSV's directory.
    Metadata {
        csv: PathBuf,
        sr: usize,
        #[serde(default = "one")]
        test_fold: usize,
    },
}

fn one() -> usize {
    1
}

impl DataSection {
    pub fn sr(&self) -> usize {
        match self {
            DataSection::Synthetic { sr, .. } | DataSection::Metadata { sr, .. } => *sr,
        }
    }

    pub fn test_fold(&self) -> usize {
        match self {
            DataSection::Synthetic { test_fold, .. } | DataSection::Metadata { test_fold, .. } => *test_fold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Input window in samples.
    pub i_len: usize,
    /// Width multiplier of the filter counts.
    pub x: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { i_len: 30_225, x: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrideName {
    Span,
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr0: f64,
    pub schedule: Vec<usize>,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub examples_per_epoch: Option<usize>,
    pub val_interval: usize,
    pub crop_stride: StrideName,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            lr0: d.lr0,
            schedule: d.schedule,
            warmup_epochs: d.warmup_epochs,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
            examples_per_epoch: d.examples_per_epoch,
            val_interval: d.val_interval,
            crop_stride: StrideName::Span,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Magnitude,
    Taylor,
    HybridMagnitude,
    HybridTaylor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrainName {
    FinetuneOnly,
    Retrain,
    Scratch,
    Distill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewireName {
    Reinit,
    Slice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub method: MethodName,
    pub prune_sfeb: bool,
    pub target_channel_fraction: f64,
    pub finetune_epochs_per_step: usize,
    pub finetune_lr_factor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_examples_per_epoch: Option<usize>,
    pub sparsify_fraction: f64,
    pub retrain_mode: RetrainName,
    pub dense_rewire: RewireName,
}

impl Default for PruneSection {
    fn default() -> Self {
        let d = PruneConfig::default();
        Self {
            method: MethodName::HybridTaylor,
            prune_sfeb: d.prune_sfeb,
            target_channel_fraction: d.target_channel_fraction,
            finetune_epochs_per_step: d.finetune_epochs_per_step,
            finetune_lr_factor: d.finetune_lr_factor,
            finetune_examples_per_epoch: d.finetune_examples_per_epoch,
            sparsify_fraction: d.sparsify_fraction,
            retrain_mode: RetrainName::Scratch,
            dense_rewire: RewireName::Slice,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillName {
    L1,
    L2,
    L3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub loss: DistillName,
    pub temperature: f64,
    pub alpha: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            loss: DistillName::L1,
            temperature: d.temperature,
            alpha: d.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    /// Training clips whose centred windows calibrate activation ranges.
    pub calib_clips: usize,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self { calib_clips: 64 }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: "<config>".into(),
            source: Box::new(source),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.train_config().validate().map_err(|e| bad(&e))?;
        self.prune_config().validate().map_err(|e| bad(&e))?;
        if self.model.x == 0 || self.model.i_len == 0 {
            return Err(ConfigError::Invalid("model.x and model.i_len must be positive".into()));
        }
        if self.data.sr() == 0 {
            return Err(ConfigError::Invalid("data.sr must be positive".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            lr0: t.lr0,
            schedule: t.schedule.clone(),
            warmup_epochs: t.warmup_epochs,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            examples_per_epoch: t.examples_per_epoch,
            val_interval: t.val_interval,
            crop_stride: match t.crop_stride {
                StrideName::Span => CropStride::Span,
                StrideName::Literal => CropStride::Literal,
            },
            seed: derive_seed(self.seed, "train"),
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            loss: match self.distill.loss {
                DistillName::L1 => DistillLoss::L1,
                DistillName::L2 => DistillLoss::L2,
                DistillName::L3 => DistillLoss::L3,
            },
            temperature: self.distill.temperature,
            alpha: self.distill.alpha,
        }
    }

    pub fn prune_config(&self) -> PruneConfig {
        let p = &self.prune;
        PruneConfig {
            method: match p.method {
                MethodName::Magnitude => PruneMethod::Magnitude,
                MethodName::Taylor => PruneMethod::Taylor,
                MethodName::HybridMagnitude => PruneMethod::HybridMagnitude,
                MethodName::HybridTaylor => PruneMethod::HybridTaylor,
            },
            prune_sfeb: p.prune_sfeb,
            target_channel_fraction: p.target_channel_fraction,
            finetune_epochs_per_step: p.finetune_epochs_per_step,
            finetune_lr_factor: p.finetune_lr_factor,
            finetune_examples_per_epoch: p.finetune_examples_per_epoch,
            sparsify_fraction: p.sparsify_fraction,
            retrain_mode: match p.retrain_mode {
                RetrainName::FinetuneOnly => RetrainMode::FinetuneOnly,
                RetrainName::Retrain => RetrainMode::Retrain,
                RetrainName::Scratch => RetrainMode::Scratch,
                RetrainName::Distill => RetrainMode::Distill,
            },
            dense_rewire: match p.dense_rewire {
                RewireName::Reinit => DenseRewire::Reinit,
                RewireName::Slice => DenseRewire::Slice,
            },
            distill: self.distill_config(),
            seed: derive_seed(self.seed, "prune"),
        }
    }
}
