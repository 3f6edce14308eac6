//! Pipeline stages shared by the CLI and the acceptance suite. Every stage
//! reads and writes ACDF containers under the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use acdnet_core::compress::{calibration_batches, prune_iteratively, prune_log_csv, retrain_pruned, CompressError, PrunedModel};
use acdnet_core::data::{DataError, Dataset, LabeledClip, PCM_SCALE};
use acdnet_core::init::derive_seed;
use acdnet_core::model::{ModelError, Params};
use acdnet_core::net::{build_acdnet, cost_report, CostReport, NetError, NetworkSpec};
use acdnet_core::quant::{
    dequantized_params, emit_c_source, fold_batchnorm, folded_infer, int8_ten_crop_predict, load_model, model_size_bytes,
    plan_memory, quantize_int8, save_model, Container, ContainerError, ContainerMode, EmitError, MemoryMode, PlanError, QuantError,
    QuantizedModel,
};
use acdnet_core::tensor::Tensor;
use acdnet_core::train::{
    argmax, bootstrap_ci, loss_curve_csv, padded_window, ten_crop_predict, train, CropStride, EvalReport, TrainError,
    TrainOptions, CROPS, Z_95,
};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, DataSection, PipelineConfig};
use crate::metadata::{load_metadata_dataset, MetadataError};
use crate::synth::make_synthetic_dataset;

pub const INIT_FILE: &str = "init.acdf";
pub const BASE_FILE: &str = "base.acdf";
pub const FINETUNED_FILE: &str = "finetuned.acdf";
pub const PRUNED_FILE: &str = "pruned.acdf";
pub const INT8_FILE: &str = "int8.acdf";
pub const C_DIR: &str = "c";

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Emit(#[from] EmitError),
    #[error("{0}")]
    Usage(String),
}

impl ForgeError {
    /// Process exit code; each error class has its own.
    pub fn exit_code(&self) -> i32 {
        match self {
            ForgeError::Usage(_) => 2,
            ForgeError::Config(_) => 3,
            ForgeError::Io { .. } | ForgeError::Container(ContainerError::Io(_)) => 4,
            ForgeError::Metadata(_) | ForgeError::Data(_) => 5,
            ForgeError::Container(_) | ForgeError::Net(_) | ForgeError::Model(_) => 6,
            ForgeError::Train(_) => 7,
            ForgeError::Compress(_) => 8,
            ForgeError::Quant(_) | ForgeError::Plan(_) | ForgeError::Emit(_) => 9,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ForgeError + '_ {
    move |source| ForgeError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), ForgeError> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ForgeError> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("report serializes") + "\n"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset, ForgeError> {
    Ok(match &cfg.data {
        DataSection::Synthetic {
            n_cls,
            clips_per_class,
            sr,
            len,
            dataset_seed,
            ..
        } => make_synthetic_dataset(*n_cls, *clips_per_class, *sr, *len, *dataset_seed),
        DataSection::Metadata { csv, sr, .. } => load_metadata_dataset(csv, *sr)?,
    })
}

/// Train, validation and test clips for the configured test fold.
pub struct Splits<'a> {
    pub train: Vec<&'a LabeledClip>,
    pub val: Vec<&'a LabeledClip>,
    pub test: Vec<&'a LabeledClip>,
}

pub fn splits<'a>(ds: &'a Dataset, cfg: &PipelineConfig) -> Result<Splits<'a>, ForgeError> {
    let s = ds.train_val_test(cfg.data.test_fold())?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.clips[i]).collect::<Vec<_>>();
    Ok(Splits {
        train: pick(&s.train),
        val: pick(&s.val),
        test: pick(&s.test),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalJson {
    pub clips: usize,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl From<&EvalReport> for EvalJson {
    fn from(r: &EvalReport) -> Self {
        Self {
            clips: r.correct.len(),
            accuracy: r.accuracy,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            confusion: r.confusion.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostJson {
    pub filters: usize,
    pub params: usize,
    pub flops: usize,
}

impl From<CostReport> for CostJson {
    fn from(c: CostReport) -> Self {
        Self {
            filters: c.filters,
            params: c.params,
            flops: c.flops,
        }
    }
}

fn report(clips: &[&LabeledClip], predicted: &[usize], n_cls: usize) -> EvalReport {
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    EvalReport::from_predictions(&labels, predicted, n_cls, 0)
}

/// Ten-window evaluation of any float model given as BN-folded params.
pub fn eval_folded(spec: &NetworkSpec, folded: &Params, clips: &[&LabeledClip], stride: CropStride) -> Result<EvalReport, ForgeError> {
    let t = spec.i_len;
    let mut predicted = Vec::with_capacity(clips.len());
    for clip in clips {
        let mut data = Vec::with_capacity(CROPS * t);
        for s in stride.starts(clip.samples.len(), t)? {
            data.extend(padded_window(&clip.samples, t, s).into_iter().map(|v| (v / PCM_SCALE) as f32));
        }
        let x = Tensor::new(&[CROPS, 1, 1, t], data).expect("window count");
        let logits = folded_infer(spec, folded, &x, |_, _| {})?;
        let probs = acdnet_core::ops::softmax(&logits).map_err(|source| ModelError::Op {
            layer: "softmax".into(),
            source,
        })?;
        let mut mean = vec![0.0f64; spec.n_cls];
        for row in probs.data().chunks(spec.n_cls) {
            for (a, &p) in mean.iter_mut().zip(row) {
                *a += f64::from(p);
            }
        }
        predicted.push(argmax(&mean));
    }
    Ok(report(clips, &predicted, spec.n_cls))
}

pub fn eval_float(spec: &NetworkSpec, params: &Params, clips: &[&LabeledClip], stride: CropStride) -> Result<EvalReport, ForgeError> {
    let predicted = ten_crop_predict(spec, params, clips, stride)?;
    Ok(report(clips, &predicted, spec.n_cls))
}

pub fn eval_int8(model: &QuantizedModel, clips: &[&LabeledClip], stride: CropStride) -> Result<EvalReport, ForgeError> {
    let predicted = int8_ten_crop_predict(model, clips, stride)?;
    Ok(report(clips, &predicted, model.spec.n_cls))
}

/// Evaluates whatever a container holds: a checkpoint, a BN-folded float
/// model or an int8 model.
pub fn eval_container(c: &Container, clips: &[&LabeledClip], stride: CropStride) -> Result<EvalReport, ForgeError> {
    match c.mode {
        ContainerMode::Int8 => eval_int8(&c.to_quantized()?, clips, stride),
        ContainerMode::Float => {
            let spec = c.spec()?;
            let params = c.to_params()?;
            if params.check(&spec).is_ok() {
                eval_float(&spec, &params, clips, stride)
            } else {
                eval_folded(&spec, &params, clips, stride)
            }
        }
    }
}

pub struct Workspace {
    pub cfg: PipelineConfig,
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(cfg: PipelineConfig) -> Result<Self, ForgeError> {
        let dir = cfg.out.clone();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self { cfg, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn load_float(&self, name: &str) -> Result<(NetworkSpec, Params), ForgeError> {
        let c = load_model(&self.path(name))?;
        let spec = c.spec()?;
        let params = c.to_params()?;
        params.check(&spec)?;
        Ok((spec, params))
    }

    fn save_float(&self, name: &str, spec: &NetworkSpec, params: &Params) -> Result<(), ForgeError> {
        save_model(&Container::from_params(spec, params), &self.path(name))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildReport {
    pub cost: CostJson,
    pub n_cls: usize,
    pub sr: usize,
    pub i_len: usize,
}

pub fn stage_build(ws: &Workspace, ds: &Dataset) -> Result<BuildReport, ForgeError> {
    let cfg = &ws.cfg;
    let spec = build_acdnet(cfg.model.i_len, cfg.data.sr(), ds.n_cls(), cfg.model.x)?;
    let params = Params::init(&spec, derive_seed(cfg.seed, "init"))?;
    ws.save_float(INIT_FILE, &spec, &params)?;
    let r = BuildReport {
        cost: cost_report(&spec)?.into(),
        n_cls: spec.n_cls,
        sr: spec.sr,
        i_len: spec.i_len,
    };
    write_json(&ws.path("build_report.json"), &r)?;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test: EvalJson,
}

pub fn stage_train(ws: &Workspace, ds: &Dataset) -> Result<TrainReport, ForgeError> {
    let (spec, init) = ws.load_float(INIT_FILE)?;
    let sp = splits(ds, &ws.cfg)?;
    let tc = ws.cfg.train_config();
    let out = train(&spec, init, &sp.train, &sp.val, &tc, TrainOptions::default())?;
    ws.save_float(BASE_FILE, &spec, &out.params)?;
    write_text(&ws.path("train_curve.csv"), &loss_curve_csv(&out.curve))?;
    let test = eval_float(&spec, &out.params, &sp.test, tc.crop_stride)?;
    let r = TrainReport {
        best_epoch: out.best_epoch,
        best_val_acc: out.best_val_acc,
        test: (&test).into(),
    };
    write_json(&ws.path("train_report.json"), &r)?;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub iterations: usize,
    pub base: CostJson,
    pub compressed: CostJson,
    pub param_reduction: f64,
    pub flop_reduction: f64,
    pub base_test_acc: f64,
    /// Pruned model after the per-step fine-tunes only.
    pub finetune_only_test_acc: f64,
    /// After the configured final regime.
    pub final_test_acc: f64,
}

pub fn stage_prune(ws: &Workspace, ds: &Dataset) -> Result<PruneReport, ForgeError> {
    let (spec, base) = ws.load_float(BASE_FILE)?;
    let sp = splits(ds, &ws.cfg)?;
    let tc = ws.cfg.train_config();
    let pc = ws.cfg.prune_config();
    let pruned: PrunedModel = prune_iteratively(&spec, &base, &sp.train, &sp.val, &pc, &tc)?;
    ws.save_float(FINETUNED_FILE, &pruned.spec, &pruned.params)?;
    write_text(&ws.path("prune_log.csv"), &prune_log_csv(&pruned.log))?;
    let final_params = retrain_pruned(&pruned, Some((&spec, &base)), &sp.train, &sp.val, &pc, &tc)?;
    ws.save_float(PRUNED_FILE, &pruned.spec, &final_params)?;
    let compressed = cost_report(&pruned.spec)?;
    let stride = tc.crop_stride;
    let r = PruneReport {
        iterations: pruned.log.len(),
        base: pruned.base.into(),
        compressed: compressed.into(),
        param_reduction: 1.0 - compressed.params as f64 / pruned.base.params as f64,
        flop_reduction: 1.0 - compressed.flops as f64 / pruned.base.flops as f64,
        base_test_acc: eval_float(&spec, &base, &sp.test, stride)?.accuracy,
        finetune_only_test_acc: eval_float(&pruned.spec, &pruned.params, &sp.test, stride)?.accuracy,
        final_test_acc: eval_float(&pruned.spec, &final_params, &sp.test, stride)?.accuracy,
    };
    write_json(&ws.path("prune_report.json"), &r)?;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantReport {
    pub source: String,
    pub float_test_acc: f64,
    /// Float inference on weights rebuilt from the int8 codes.
    pub dequantized_test_acc: f64,
    /// Integer interpreter.
    pub int8_test_acc: f64,
    pub float_size_bytes: usize,
    pub int8_size_bytes: usize,
}

/// Centred windows of up to `n` training clips.
pub fn calibration_windows(clips: &[&LabeledClip], spec: &NetworkSpec, n: usize) -> Vec<Tensor<f32>> {
    let take = &clips[..n.min(clips.len())];
    calibration_batches(take, spec.i_len, spec.n_cls, 16).into_iter().map(|(x, _)| x).collect()
}

/// Quantizes the pruned model when present, else the base model.
pub fn stage_quantize(ws: &Workspace, ds: &Dataset) -> Result<QuantReport, ForgeError> {
    let source = if ws.path(PRUNED_FILE).exists() { PRUNED_FILE } else { BASE_FILE };
    let (spec, params) = ws.load_float(source)?;
    let sp = splits(ds, &ws.cfg)?;
    let stride = ws.cfg.train_config().crop_stride;
    let calib = calibration_windows(&sp.train, &spec, ws.cfg.quant.calib_clips);
    let q = quantize_int8(&spec, &params, &calib)?;
    let container = Container::from_quantized(&q);
    save_model(&container, &ws.path(INT8_FILE))?;
    let r = QuantReport {
        source: source.to_string(),
        float_test_acc: eval_float(&spec, &params, &sp.test, stride)?.accuracy,
        dequantized_test_acc: eval_folded(&spec, &dequantized_params(&q), &sp.test, stride)?.accuracy,
        int8_test_acc: eval_int8(&q, &sp.test, stride)?.accuracy,
        float_size_bytes: model_size_bytes(&Container::from_params(&spec, &fold_batchnorm(&spec, &params)?)),
        int8_size_bytes: model_size_bytes(&container),
    };
    write_json(&ws.path("quant_report.json"), &r)?;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExportReport {
    pub schedule_len: usize,
    pub const_data_bytes: usize,
    pub arena_bytes: usize,
    pub naive_peak_bytes: usize,
    pub fused_peak_bytes: usize,
    pub test_vector_classes: Vec<usize>,
}

pub fn stage_export(ws: &Workspace, ds: &Dataset) -> Result<ExportReport, ForgeError> {
    let container = load_model(&ws.path(INT8_FILE))?;
    let spec = container.spec()?;
    let sp = splits(ds, &ws.cfg)?;
    let windows: Vec<Vec<f32>> = calibration_windows(&sp.test, &spec, 10)
        .iter()
        .flat_map(|x| x.data().chunks(spec.i_len).map(<[f32]>::to_vec).collect::<Vec<_>>())
        .collect();
    let files = emit_c_source(&container, &ws.path(C_DIR), &windows)?;
    let r = ExportReport {
        schedule_len: files.schedule_len,
        const_data_bytes: files.const_data_bytes,
        arena_bytes: files.arena_bytes,
        naive_peak_bytes: plan_memory(&spec, MemoryMode::Naive, 1)?.peak_bytes,
        fused_peak_bytes: plan_memory(&spec, MemoryMode::Fused, 1)?.peak_bytes,
        test_vector_classes: files.vectors.iter().map(|v| v.class).collect(),
    };
    write_json(&ws.path("export_report.json"), &r)?;
    Ok(r)
}

/// Test-fold evaluation of a container.
pub fn stage_eval(ws: &Workspace, ds: &Dataset, model: &Path) -> Result<EvalJson, ForgeError> {
    let c = load_model(model)?;
    let sp = splits(ds, &ws.cfg)?;
    let r = eval_container(&c, &sp.test, ws.cfg.train_config().crop_stride)?;
    Ok((&r).into())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CiJson {
    pub trials: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub half_width: f64,
}

/// `μ ± 1.96·σ/√N` over per-trial accuracies.
pub fn ci_from_accuracies(accs: &[f64]) -> CiJson {
    let (lo, hi) = bootstrap_ci(accs, Z_95);
    CiJson {
        trials: accs.len(),
        mean: accs.iter().sum::<f64>() / accs.len().max(1) as f64,
        ci_low: lo,
        ci_high: hi,
        half_width: (hi - lo) / 2.0,
    }
}

/// One accuracy per line; blank lines and `#` comments are skipped.
pub fn read_accuracies(path: &Path) -> Result<Vec<f64>, ForgeError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.parse::<f64>().map_err(|_| ForgeError::Usage(format!("{}: `{l}` is not a number", path.display()))))
        .collect()
}

/// The 1000-resample balanced bootstrap over the test fold.
pub fn stage_ci(ws: &Workspace, ds: &Dataset, model: &Path) -> Result<CiJson, ForgeError> {
    let c = load_model(model)?;
    let sp = splits(ds, &ws.cfg)?;
    let r = eval_container(&c, &sp.test, ws.cfg.train_config().crop_stride)?;
    let accs = acdnet_core::train::bootstrap_accuracies(
        &r.correct,
        acdnet_core::train::BOOTSTRAP_RESAMPLES,
        derive_seed(ws.cfg.seed, "bootstrap"),
    );
    Ok(ci_from_accuracies(&accs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub build: BuildReport,
    pub train: TrainReport,
    pub prune: PruneReport,
    pub quant: QuantReport,
    pub export: ExportReport,
    /// SHA-256 of every ACDF artifact, by file name.
    pub artifacts: Vec<(String, String)>,
}

pub const ARTIFACTS: [&str; 5] = [INIT_FILE, BASE_FILE, FINETUNED_FILE, PRUNED_FILE, INT8_FILE];

/// build → train → prune → quantize → export.
pub fn run_all(ws: &Workspace) -> Result<RunReport, ForgeError> {
    let ds = load_dataset(&ws.cfg)?;
    let build = stage_build(ws, &ds)?;
    let train = stage_train(ws, &ds)?;
    let prune = stage_prune(ws, &ds)?;
    let quant = stage_quantize(ws, &ds)?;
    let export = stage_export(ws, &ds)?;
    let mut artifacts = Vec::new();
    for name in ARTIFACTS {
        let path = ws.path(name);
        artifacts.push((name.to_string(), sha256_hex(&fs::read(&path).map_err(io_err(&path))?)));
    }
    let r = RunReport {
        build,
        train,
        prune,
        quant,
        export,
        artifacts,
    };
    write_json(&ws.path("run_report.json"), &r)?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_accuracies_give_zero_width() {
        let ci = ci_from_accuracies(&[0.8; 50]);
        assert_eq!(ci.half_width, 0.0);
    }

    #[test]
    fn exit_codes_are_distinct() {
        let errs = [
            ForgeError::Usage("x".into()),
            ForgeError::Config(ConfigError::Invalid("x".into())),
            ForgeError::Io {
                path: "p".into(),
                source: std::io::Error::other("x"),
            },
            ForgeError::Data(DataError::EmptyFold(1)),
            ForgeError::Container(ContainerError::BadMagic),
            ForgeError::Train(TrainError::SingleClass),
            ForgeError::Compress(CompressError::EmptyCalibration),
            ForgeError::Quant(QuantError::EmptyCalibration),
        ];
        let mut codes: Vec<i32> = errs.iter().map(ForgeError::exit_code).collect();
        assert!(codes.iter().all(|&c| c > 1));
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), errs.len());
    }
}
