//! Hybrid compression: global sparsification, iterative channel pruning
//! with short fine-tunes, then a final training regime.

mod distill;
mod score;
mod sparsify;

pub use distill::{distill_loss, distill_loss_node, soft_entropy, DistillConfig, DistillLoss};
pub use score::{channel_scores_magnitude, channel_scores_taylor, select_candidate, sfeb_convs, ChannelScore};
pub use sparsify::{sparsify_count, sparsify_global, SparsityMask};

use std::fmt::Write as _;

use thiserror::Error;

use crate::data::{LabeledClip, PCM_SCALE};
use crate::init::derive_seed;
use crate::model::{prune_channel, ChannelRemoval, DenseRewire, ModelError, Params};
use crate::net::{count_filters, cost_report, CostReport, NetError, NetworkSpec};
use crate::tensor::Tensor;
use crate::train::{padded_window, train, Teacher, TrainConfig, TrainError, TrainOptions};

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("no prunable channel left at {filters} filters (goal {goal})")]
    Unreachable { filters: usize, goal: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PruneMethod {
    Magnitude,
    Taylor,
    HybridMagnitude,
    #[default]
    HybridTaylor,
}

impl PruneMethod {
    pub fn is_hybrid(self) -> bool {
        matches!(self, PruneMethod::HybridMagnitude | PruneMethod::HybridTaylor)
    }

    pub fn uses_taylor(self) -> bool {
        matches!(self, PruneMethod::Taylor | PruneMethod::HybridTaylor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RetrainMode {
    FinetuneOnly,
    Retrain,
    #[default]
    Scratch,
    Distill,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    pub method: PruneMethod,
    pub prune_sfeb: bool,
    /// Fraction of all conv filters to remove.
    pub target_channel_fraction: f64,
    pub finetune_epochs_per_step: usize,
    /// Fine-tune learning rate as a fraction of the training `lr0`.
    pub finetune_lr_factor: f64,
    /// Mixed examples per fine-tune epoch; `None` follows the training config.
    pub finetune_examples_per_epoch: Option<usize>,
    /// Only used by the hybrid methods.
    pub sparsify_fraction: f64,
    pub retrain_mode: RetrainMode,
    pub dense_rewire: DenseRewire,
    pub distill: DistillConfig,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            method: PruneMethod::HybridTaylor,
            prune_sfeb: true,
            target_channel_fraction: 0.8,
            finetune_epochs_per_step: 2,
            finetune_lr_factor: 0.01,
            finetune_examples_per_epoch: None,
            sparsify_fraction: 0.95,
            retrain_mode: RetrainMode::Scratch,
            dense_rewire: DenseRewire::Slice,
            distill: DistillConfig::default(),
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), CompressError> {
        if !(self.target_channel_fraction > 0.0 && self.target_channel_fraction < 1.0) {
            return Err(CompressError::Config(format!(
                "target fraction {} outside (0, 1)",
                self.target_channel_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.sparsify_fraction) {
            return Err(CompressError::Config(format!(
                "sparsify fraction {} outside [0, 1)",
                self.sparsify_fraction
            )));
        }
        if !(self.finetune_lr_factor > 0.0) {
            return Err(CompressError::Config("fine-tune lr factor must be positive".into()));
        }
        self.distill.validate()
    }

    /// Filter count at which pruning stops.
    pub fn goal(&self, original_filters: usize) -> usize {
        ((1.0 - self.target_channel_fraction) * original_filters as f64 + 1e-9).floor() as usize
    }
}

/// Removes the lowest-scoring eligible channel.
pub fn prune_step(
    spec: &NetworkSpec,
    params: &Params,
    scores: &[ChannelScore],
    cfg: &PruneConfig,
    iteration: usize,
) -> Result<(NetworkSpec, Params, ChannelScore, ChannelRemoval), CompressError> {
    let pick = select_candidate(spec, scores, cfg.prune_sfeb)
        .ok_or(CompressError::Unreachable {
            filters: count_filters(spec),
            goal: 0,
        })?
        .clone();
    let seed = derive_seed(cfg.seed, &format!("rewire{iteration}"));
    let (next, p, removal) = prune_channel(spec, params, &pick.layer, pick.channel, cfg.dense_rewire, seed)?;
    Ok((next, p, pick, removal))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneLogRow {
    pub iteration: usize,
    pub layer: String,
    pub channel: usize,
    pub raw_score: f64,
    pub params: usize,
    pub flops: usize,
    pub finetune_acc: f64,
}

pub fn prune_log_csv(rows: &[PruneLogRow]) -> String {
    let mut s = String::from("iteration,layer,channel,raw_score,params,flops,finetune_acc\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.iteration, r.layer, r.channel, r.raw_score, r.params, r.flops, r.finetune_acc
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct PrunedModel {
    pub spec: NetworkSpec,
    pub params: Params,
    pub log: Vec<PruneLogRow>,
    pub base: CostReport,
}

/// One centred window per clip with a one-hot target, in batches.
pub fn calibration_batches(clips: &[&LabeledClip], t: usize, n_cls: usize, batch: usize) -> Vec<(Tensor<f32>, Tensor<f32>)> {
    clips
        .chunks(batch.max(1))
        .map(|chunk| {
            let mut xs = Vec::with_capacity(chunk.len() * t);
            let mut ys = vec![0.0f32; chunk.len() * n_cls];
            for (i, c) in chunk.iter().enumerate() {
                let padded = c.samples.len() + 2 * (t / 2);
                let start = padded.saturating_sub(t) / 2;
                xs.extend(padded_window(&c.samples, t, start).into_iter().map(|v| (v / PCM_SCALE) as f32));
                ys[i * n_cls + c.label] = 1.0;
            }
            (
                Tensor::new(&[chunk.len(), 1, 1, t], xs).expect("window size"),
                Tensor::new(&[chunk.len(), n_cls], ys).expect("label size"),
            )
        })
        .collect()
}

/// Steps 1 and 2: sparsify (hybrid methods), then remove one channel at a
/// time with a short masked fine-tune after each removal until the filter
/// count reaches the goal. The mask is dropped from the result.
pub fn prune_iteratively(
    spec: &NetworkSpec,
    params: &Params,
    train_clips: &[&LabeledClip],
    val_clips: &[&LabeledClip],
    cfg: &PruneConfig,
    train_cfg: &TrainConfig,
) -> Result<PrunedModel, CompressError> {
    cfg.validate()?;
    let base = cost_report(spec)?;
    let goal = cfg.goal(base.filters);
    let fraction = if cfg.method.is_hybrid() { cfg.sparsify_fraction } else { 0.0 };
    let (mut params, mut mask) = sparsify_global(params, fraction)?;
    let mut spec = spec.clone();
    let calib = if cfg.method.uses_taylor() {
        calibration_batches(train_clips, spec.i_len, spec.n_cls, train_cfg.batch_size)
    } else {
        Vec::new()
    };
    let mut log = Vec::new();
    let mut iteration = 0;
    while count_filters(&spec) > goal {
        iteration += 1;
        let scores = if cfg.method.uses_taylor() {
            channel_scores_taylor(&spec, &params, &calib)?
        } else {
            channel_scores_magnitude(&spec, &params)?
        };
        let (next, p, pick, removal) = prune_step(&spec, &params, &scores, cfg, iteration).map_err(|e| match e {
            CompressError::Unreachable { filters, .. } => CompressError::Unreachable { filters, goal },
            other => other,
        })?;
        removal.apply(&mut mask.masks);
        mask.masks.retain(|n, m| p.get(n).is_some_and(|t| t.shape() == m.shape()));
        let ft = TrainConfig {
            epochs: cfg.finetune_epochs_per_step,
            lr0: train_cfg.lr0 * cfg.finetune_lr_factor,
            schedule: Vec::new(),
            warmup_epochs: 0,
            examples_per_epoch: cfg.finetune_examples_per_epoch.or(train_cfg.examples_per_epoch),
            // only the fine-tuned end state is scored
            val_interval: cfg.finetune_epochs_per_step.max(1),
            seed: derive_seed(cfg.seed, &format!("finetune{iteration}")),
            ..train_cfg.clone()
        };
        let (finetuned, acc) = if ft.epochs == 0 {
            (p, f64::NAN)
        } else {
            let opts = TrainOptions {
                mask: Some(&mask.masks),
                teacher: None,
            };
            let out = train(&next, p, train_clips, val_clips, &ft, opts)?;
            (out.params, out.best_val_acc)
        };
        spec = next;
        params = finetuned;
        let cost = cost_report(&spec)?;
        log.push(PruneLogRow {
            iteration,
            layer: pick.layer,
            channel: pick.channel,
            raw_score: pick.raw_score,
            params: cost.params,
            flops: cost.flops,
            finetune_acc: acc,
        });
    }
    Ok(PrunedModel { spec, params, log, base })
}

/// Step 3 on an already pruned model.
pub fn retrain_pruned(
    pruned: &PrunedModel,
    teacher: Option<(&NetworkSpec, &Params)>,
    train_clips: &[&LabeledClip],
    val_clips: &[&LabeledClip],
    cfg: &PruneConfig,
    train_cfg: &TrainConfig,
) -> Result<Params, CompressError> {
    let fresh = || Params::init(&pruned.spec, derive_seed(cfg.seed, "scratch"));
    let run = |init: Params, opts: TrainOptions| -> Result<Params, CompressError> {
        Ok(train(&pruned.spec, init, train_clips, val_clips, train_cfg, opts)?.params)
    };
    match cfg.retrain_mode {
        RetrainMode::FinetuneOnly => Ok(pruned.params.clone()),
        RetrainMode::Retrain => run(pruned.params.clone(), TrainOptions::default()),
        RetrainMode::Scratch => run(fresh()?, TrainOptions::default()),
        RetrainMode::Distill => {
            let (spec, params) = teacher.ok_or_else(|| CompressError::Config("distillation needs a teacher".into()))?;
            let t = Teacher {
                spec,
                params,
                distill: cfg.distill,
            };
            run(
                fresh()?,
                TrainOptions {
                    mask: None,
                    teacher: Some(t),
                },
            )
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompressOutcome {
    pub spec: NetworkSpec,
    pub params: Params,
    pub log: Vec<PruneLogRow>,
    pub base: CostReport,
    pub compressed: CostReport,
}

/// Full three-step pipeline; the input model serves as the distillation teacher.
pub fn hybrid_prune(
    spec: &NetworkSpec,
    params: &Params,
    train_clips: &[&LabeledClip],
    val_clips: &[&LabeledClip],
    cfg: &PruneConfig,
    train_cfg: &TrainConfig,
) -> Result<CompressOutcome, CompressError> {
    let pruned = prune_iteratively(spec, params, train_clips, val_clips, cfg, train_cfg)?;
    let final_params = retrain_pruned(&pruned, Some((spec, params)), train_clips, val_clips, cfg, train_cfg)?;
    let compressed = cost_report(&pruned.spec)?;
    Ok(CompressOutcome {
        spec: pruned.spec,
        params: final_params,
        log: pruned.log,
        base: pruned.base,
        compressed,
    })
}

impl CompressOutcome {
    /// Fractional parameter reduction relative to the base model.
    pub fn param_reduction(&self) -> f64 {
        1.0 - self.compressed.params as f64 / self.base.params as f64
    }

    pub fn flop_reduction(&self) -> f64 {
        1.0 - self.compressed.flops as f64 / self.base.flops as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn goal_is_remaining_fraction() {
        let cfg = PruneConfig::default();
        assert_eq!(cfg.goal(257), 51);
        assert_eq!(cfg.goal(2074), 414);
        assert_eq!(cfg.goal(10), 2);
    }

    #[test]
    fn csv_header() {
        assert!(prune_log_csv(&[]).starts_with("iteration,layer,channel,raw_score,params,flops,finetune_acc"));
    }

    #[test]
    fn rejects_bad_fractions() {
        let c = PruneConfig {
            target_channel_fraction: 1.0,
            ..PruneConfig::default()
        };
        assert!(c.validate().is_err());
        let c = PruneConfig {
            sparsify_fraction: 1.0,
            ..PruneConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
