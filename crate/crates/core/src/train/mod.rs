//! Between-class training, ten-window evaluation and confidence intervals.

mod bc;
mod eval;

pub use bc::{
    bc_mix, crop_gain_db, make_training_example, mix_crops, mix_ratio, padded_window, window_starts, GAIN_FLOOR_DB,
};
pub use eval::{
    argmax, bootstrap_accuracies, bootstrap_ci, bootstrap_interval, ten_crop_eval, ten_crop_predict, CropStride,
    EvalReport, BOOTSTRAP_RESAMPLES, CROPS, Z_95,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compress::{distill_loss_node, CompressError, DistillConfig};
use crate::data::{DataError, Dataset, LabeledClip};
use crate::init::derive_seed;
use crate::model::{build_forward, infer, Mode, ModelError, Params};
use crate::net::NetworkSpec;
use crate::optim::{sgd_nesterov_step, OptimError, OptimizerState};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("mixing ratio {0} outside (0, 1)")]
    Ratio(f64),
    #[error("clip of {len} samples cannot hold a {t}-sample window")]
    ClipTooShort { len: usize, t: usize },
    #[error("both clips have label {0}")]
    SameLabel(usize),
    #[error("training set needs at least two classes")]
    SingleClass,
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}")]
    Diverged {
        epoch: usize,
        /// Parameters after the last step that kept everything finite.
        params: Box<Params>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("distillation: {0}")]
    Distill(Box<CompressError>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    /// Epochs after which the learning rate is divided by 10.
    pub schedule: Vec<usize>,
    /// Epochs run at `0.1·lr0` before the schedule starts.
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Mixed examples per epoch; `None` means one per training clip.
    pub examples_per_epoch: Option<usize>,
    /// Validate every this many epochs (and after the last).
    pub val_interval: usize,
    pub crop_stride: CropStride,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            lr0: 0.1,
            schedule: vec![600, 1200, 1800],
            warmup_epochs: 10,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            examples_per_epoch: None,
            val_interval: 1,
            crop_stride: CropStride::Span,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.schedule.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("schedule {:?} is not strictly increasing", self.schedule));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} is negative", self.weight_decay));
        }
        if self.batch_size == 0 || self.val_interval == 0 {
            return bad("batch_size and val_interval must be positive".into());
        }
        Ok(())
    }

    /// Learning rate of 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.warmup_epochs {
            return self.lr0 * 0.1;
        }
        let decays = self.schedule.iter().filter(|&&m| epoch > m).count();
        self.lr0 / 10f64.powi(decays as i32)
    }
}

/// Per-tensor 0/1 multipliers re-applied to the weights after every step.
pub type Mask = BTreeMap<String, Tensor<f32>>;

pub fn apply_mask(params: &mut Params, mask: &Mask) {
    for (name, m) in mask {
        if let Some(p) = params.get_mut(name) {
            if p.shape() == m.shape() {
                for (v, &k) in p.data_mut().iter_mut().zip(m.data()) {
                    *v *= k;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
}

/// `epoch,lr,train_loss,val_acc` with an empty cell for skipped validation.
pub fn loss_curve_csv(curve: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_acc\n");
    for e in curve {
        let val = e.val_acc.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", e.epoch, e.lr, e.train_loss, val);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub params: Params,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub curve: Vec<EpochLog>,
}

/// A batch of `n` mixed examples as `([n,1,1,T], [n,n_cls])`.
pub fn mixed_batch(
    clips: &[&LabeledClip],
    n: usize,
    t: usize,
    n_cls: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<f32>), TrainError> {
    let first = clips.first().ok_or(TrainError::Empty("training"))?;
    if clips.iter().all(|c| c.label == first.label) {
        return Err(TrainError::SingleClass);
    }
    let mut xs = Vec::with_capacity(n * t);
    let mut ys = Vec::with_capacity(n * n_cls);
    for _ in 0..n {
        let a = clips[rng.random_range(0..clips.len())];
        let b = loop {
            let b = clips[rng.random_range(0..clips.len())];
            if b.label != a.label {
                break b;
            }
        };
        let (x, y) = make_training_example(a, b, t, n_cls, rng)?;
        xs.extend(x);
        ys.extend(y);
    }
    Ok((
        Tensor::new(&[n, 1, 1, t], xs).expect("batch size"),
        Tensor::new(&[n, n_cls], ys).expect("label size"),
    ))
}

/// KL loss of a batch in training mode without touching the parameters.
pub fn batch_loss(
    spec: &NetworkSpec,
    params: &Params,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    dropout_seed: u64,
) -> Result<f64, TrainError> {
    let mut f = build_forward(spec, params, x.clone(), Mode::Train { dropout_seed })?;
    let target = f.graph.input("target", y.clone());
    let loss = f.graph.kl_div("loss", f.probs, target).map_err(ModelError::from)?;
    f.graph.forward().map_err(ModelError::from)?;
    Ok(value_of(&f.graph, loss))
}

fn value_of(g: &crate::graph::ComputeGraph<f32>, id: crate::graph::NodeId) -> f64 {
    g.value(id).map_or(f64::NAN, |t| f64::from(t.data()[0]))
}

/// A trained model whose logits guide a student through a distillation loss.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a> {
    pub spec: &'a NetworkSpec,
    pub params: &'a Params,
    pub distill: DistillConfig,
}

/// Extras for [`train`]: a sparsity mask kept on the weights and a teacher
/// replacing the plain KL objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    pub mask: Option<&'a Mask>,
    pub teacher: Option<Teacher<'a>>,
}

/// One forward/backward pass and Nesterov update. Updates batch-norm running
/// statistics and returns the loss before the step.
pub fn train_step(
    spec: &NetworkSpec,
    params: &mut Params,
    opt: &mut OptimizerState<f32>,
    x: Tensor<f32>,
    y: Tensor<f32>,
    dropout_seed: u64,
    teacher: Option<&Teacher>,
) -> Result<f64, TrainError> {
    let teacher_logits = match teacher {
        Some(t) => Some(infer(t.spec, t.params, &x)?),
        None => None,
    };
    let mut f = build_forward(spec, params, x, Mode::Train { dropout_seed })?;
    let target = f.graph.input("target", y);
    let loss = match (teacher, &teacher_logits) {
        (Some(t), Some(tl)) => distill_loss_node(&mut f.graph, f.logits, f.probs, tl, target, &t.distill)
            .map_err(|e| TrainError::Distill(Box::new(e)))?,
        _ => f.graph.kl_div("loss", f.probs, target).map_err(ModelError::from)?,
    };
    f.graph.forward().map_err(ModelError::from)?;
    let value = value_of(&f.graph, loss);
    if !value.is_finite() {
        return Ok(value);
    }
    let mut grads = f.graph.backward(loss).map_err(ModelError::from)?;
    for (name, id) in &f.params {
        if let Some(g) = grads.take(*id) {
            let p = params.get_mut(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            sgd_nesterov_step(name, p, &g, opt)?;
        }
    }
    f.update_running(params)?;
    Ok(value)
}

/// Trains on `train` clips, validating on `val` clips with ten-window
/// evaluation and keeping the best validation epoch (earliest on ties).
pub fn train(
    spec: &NetworkSpec,
    init: Params,
    train: &[&LabeledClip],
    val: &[&LabeledClip],
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mask = opts.mask;
    if val.is_empty() {
        return Err(TrainError::Empty("validation"));
    }
    let mut params = init;
    if let Some(m) = mask {
        apply_mask(&mut params, m);
    }
    let mut opt = OptimizerState::new(cfg.lr_at(1), cfg.momentum, cfg.weight_decay)?;
    let per_epoch = cfg.examples_per_epoch.unwrap_or(train.len()).max(1);
    let mut best: Option<(usize, f64, Params)> = None;
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("epoch{epoch}")));
        let mut total = 0.0;
        let mut done = 0;
        let mut step = 0;
        while done < per_epoch {
            let n = cfg.batch_size.min(per_epoch - done);
            let (x, y) = mixed_batch(train, n, spec.i_len, spec.n_cls, &mut rng)?;
            let before = params.clone();
            let drop_seed = derive_seed(cfg.seed, &format!("drop{epoch}/{step}"));
            let loss = train_step(spec, &mut params, &mut opt, x, y, drop_seed, opts.teacher.as_ref())?;
            if !loss.is_finite() || params.iter().any(|(_, t)| !t.is_finite()) {
                return Err(TrainError::Diverged {
                    epoch,
                    params: Box::new(before),
                });
            }
            if let Some(m) = mask {
                apply_mask(&mut params, m);
            }
            total += loss * n as f64;
            done += n;
            step += 1;
        }
        let validate = epoch % cfg.val_interval == 0 || epoch == cfg.epochs;
        let val_acc = if validate {
            let predicted = ten_crop_predict(spec, &params, val, cfg.crop_stride)?;
            let hits = predicted.iter().zip(val).filter(|(p, c)| **p == c.label).count();
            Some(hits as f64 / val.len() as f64)
        } else {
            None
        };
        if let Some(acc) = val_acc {
            if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
                best = Some((epoch, acc, params.clone()));
            }
        }
        curve.push(EpochLog {
            epoch,
            lr: opt.lr,
            train_loss: total / done as f64,
            val_acc,
        });
    }
    let (best_epoch, best_val_acc, params) = best.unwrap_or((0, 0.0, params));
    Ok(TrainOutcome {
        params,
        best_epoch,
        best_val_acc,
        curve,
    })
}

/// Runs [`train`] on a dataset split with `test_fold` held out.
pub fn train_fold(
    spec: &NetworkSpec,
    init: Params,
    ds: &Dataset,
    test_fold: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let split = ds.train_val_test(test_fold)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.clips[i]).collect::<Vec<_>>();
    train(spec, init, &pick(&split.train), &pick(&split.val), cfg, TrainOptions::default())
}
