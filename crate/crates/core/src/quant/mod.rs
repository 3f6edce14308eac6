//! Post-training int8 quantization, the ACDF container, activation memory
//! planning and C source emission.

mod container;
mod emit;
mod int8;
mod memplan;
mod schedule;

pub use container::{load_model, model_size_bytes, save_model, Container, ContainerError, ContainerMode, Record, HEADER_LEN};
pub use emit::{emit_c_source, parse_test_vectors, EmitError, EmittedFiles, TestVector, TEST_VECTORS};
pub use int8::{int8_infer, int8_logits, int8_ten_crop_predict, quantize_input, requant, round_shift, Requant};
pub use memplan::{plan_memory, plan_memory_fusing, Buffer, MemoryMode, MemoryPlan, PlanError};
pub use schedule::{schedule, Entry, Op};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{infer_with, ModelError, Params};
use crate::net::{LayerKind, NetworkSpec};
use crate::ops::BN_EPS;
use crate::tensor::Tensor;

/// Smallest scale handed out for degenerate ranges.
pub const SCALE_FLOOR: f32 = 1e-8;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("missing quantized tensor `{0}`")]
    MissingTensor(String),
    #[error("missing activation range `{0}`")]
    MissingActivation(String),
    #[error("input must be {expected} codes, got {found}")]
    InputLength { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `real = (code - zero_point) · scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    /// Zero-centred params covering `[-max_abs, max_abs]` with codes in `[-127, 127]`.
    pub fn symmetric(max_abs: f32) -> Self {
        Self {
            scale: (max_abs / 127.0).max(SCALE_FLOOR),
            zero_point: 0,
        }
    }

    /// Params covering `[min, max]` widened to include 0 so that real zero
    /// (padding, ReLU floor) has an exact code.
    pub fn asymmetric(min: f32, max: f32) -> Self {
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let scale = ((hi - lo) / 255.0).max(SCALE_FLOOR);
        let zero_point = (-128.0 - lo / scale).round().clamp(-128.0, 127.0) as i32;
        Self { scale, zero_point }
    }

    pub fn quantize(&self, x: f32) -> i8 {
        ((x / self.scale).round() + self.zero_point as f32).clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize(&self, q: i8) -> f32 {
        (i32::from(q) - self.zero_point) as f32 * self.scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl QData {
    pub fn len(&self) -> usize {
        match self {
            QData::F32(v) => v.len(),
            QData::I8(v) => v.len(),
            QData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn byte_len(&self) -> usize {
        match self {
            QData::F32(v) => 4 * v.len(),
            QData::I8(v) => v.len(),
            QData::I32(v) => 4 * v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub params: QuantParams,
    pub data: QData,
}

/// BN-folded int8 model: int8 weights (zero point 0), int32 biases at
/// `input_scale · weight_scale`, and calibrated activation params keyed by
/// the producing schedule entry (`input` for the network input).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub spec: NetworkSpec,
    pub tensors: BTreeMap<String, QTensor>,
    pub activations: BTreeMap<String, QuantParams>,
}

impl QuantizedModel {
    pub fn tensor(&self, name: &str) -> Result<&QTensor, QuantError> {
        self.tensors.get(name).ok_or_else(|| QuantError::MissingTensor(name.to_string()))
    }

    pub fn activation(&self, name: &str) -> Result<QuantParams, QuantError> {
        self.activations
            .get(name)
            .copied()
            .ok_or_else(|| QuantError::MissingActivation(name.to_string()))
    }

    /// Weight or bias codes of a layer.
    pub fn weight_codes(&self, layer: &str) -> Result<&[i8], QuantError> {
        match &self.tensor(&format!("{layer}.weight"))?.data {
            QData::I8(v) => Ok(v),
            _ => Err(QuantError::MissingTensor(format!("{layer}.weight"))),
        }
    }

    pub fn bias_codes(&self, layer: &str) -> Result<&[i32], QuantError> {
        match &self.tensor(&format!("{layer}.bias"))?.data {
            QData::I32(v) => Ok(v),
            _ => Err(QuantError::MissingTensor(format!("{layer}.bias"))),
        }
    }
}

/// Folds every batch-norm into the conv before it:
/// `w' = w·γ/√(var+ε)`, `b' = (b − mean)·γ/√(var+ε) + β`. The result holds
/// only conv and dense weights and biases.
pub fn fold_batchnorm(spec: &NetworkSpec, params: &Params) -> Result<Params, ModelError> {
    let mut out = Params::default();
    let mut last_conv: Option<&str> = None;
    for layer in &spec.layers {
        let n = layer.name.as_str();
        match layer.kind {
            LayerKind::Conv { .. } | LayerKind::Dense { .. } => {
                out.insert(format!("{n}.weight"), params.require(&format!("{n}.weight"))?.clone());
                out.insert(format!("{n}.bias"), params.require(&format!("{n}.bias"))?.clone());
                last_conv = matches!(layer.kind, LayerKind::Conv { .. }).then_some(n);
            }
            LayerKind::BatchNorm => {
                let conv = last_conv.take().ok_or_else(|| ModelError::MissingParam(format!("conv before {n}")))?;
                let get = |role: &str| params.require(&format!("{n}.{role}"));
                let (gamma, beta, mean, var) = (get("gamma")?, get("beta")?, get("running_mean")?, get("running_var")?);
                let w = out.get_mut(&format!("{conv}.weight")).expect("inserted above");
                let per = w.len() / gamma.len().max(1);
                let factors: Vec<f64> = gamma
                    .data()
                    .iter()
                    .zip(var.data())
                    .map(|(&g, &v)| f64::from(g) / (f64::from(v) + BN_EPS).sqrt())
                    .collect();
                for (c, chunk) in w.data_mut().chunks_mut(per).enumerate() {
                    for v in chunk {
                        *v = (f64::from(*v) * factors[c]) as f32;
                    }
                }
                let b = out.get_mut(&format!("{conv}.bias")).expect("inserted above");
                for (c, v) in b.data_mut().iter_mut().enumerate() {
                    let m = f64::from(mean.data()[c]);
                    *v = ((f64::from(*v) - m) * factors[c] + f64::from(beta.data()[c])) as f32;
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Float forward pass of a BN-folded model along the quantization schedule.
/// `visit` sees each entry and its output. Returns the logits.
pub fn folded_infer(
    spec: &NetworkSpec,
    folded: &Params,
    x: &Tensor<f32>,
    mut visit: impl FnMut(&Entry, &Tensor<f32>),
) -> Result<Tensor<f32>, ModelError> {
    use crate::ops::{self, Conv2dConfig};
    let mut cur = x.clone();
    let mut logits = None;
    for e in schedule(spec) {
        let n = e.name.as_str();
        let err = |source| ModelError::Op {
            layer: n.to_string(),
            source,
        };
        let p = |role: &str| folded.require(&format!("{n}.{role}"));
        cur = match e.op {
            Op::Conv { stride, padding, relu } => {
                let y = ops::conv2d(&cur, p("weight")?, p("bias")?, Conv2dConfig { stride, padding }).map_err(err)?;
                if relu {
                    ops::relu(&y)
                } else {
                    y
                }
            }
            Op::Folded => continue,
            Op::MaxPool { kernel } => ops::maxpool(&cur, kernel).map_err(err)?.0,
            Op::AvgPool { kernel } => ops::avgpool(&cur, kernel).map_err(err)?,
            Op::SwapAxes => ops::swap_channel_height(&cur).map_err(err)?,
            Op::Flatten => {
                let dims = ops::unflatten_dims(cur.shape()).map_err(err)?;
                cur.reshape(&dims).map_err(err)?
            }
            Op::Dense => {
                let y = ops::dense(&cur, p("weight")?, p("bias")?).map_err(err)?;
                logits = Some(y.clone());
                y
            }
            Op::Softmax => {
                logits.get_or_insert_with(|| cur.clone());
                ops::softmax(&cur).map_err(err)?
            }
        };
        visit(&e, &cur);
    }
    Ok(logits.unwrap_or(cur))
}

/// Quantizes a trained float model. Activation ranges come from running
/// the unfolded float model over `calib` (`[N, 1, 1, T]` batches).
pub fn quantize_int8(spec: &NetworkSpec, params: &Params, calib: &[Tensor<f32>]) -> Result<QuantizedModel, QuantError> {
    if calib.iter().all(|x| x.is_empty()) {
        return Err(QuantError::EmptyCalibration);
    }
    let folded = fold_batchnorm(spec, params)?;
    let sched = schedule(spec);
    let mut ranges: BTreeMap<String, (f32, f32)> = BTreeMap::new();
    let mut record = |key: &str, t: &Tensor<f32>| {
        let r = ranges.entry(key.to_string()).or_insert((f32::INFINITY, f32::NEG_INFINITY));
        for &v in t.data() {
            r.0 = r.0.min(v);
            r.1 = r.1.max(v);
        }
    };
    // range of each producer is taken after its folded batch-norm and ReLU
    let owner_at: BTreeMap<&str, &str> = sched
        .iter()
        .filter(|e| e.records_range)
        .map(|e| (e.name.as_str(), e.act.as_str()))
        .collect();
    for x in calib.iter().filter(|x| !x.is_empty()) {
        record("input", x);
        infer_with(spec, params, x, |layer, out| {
            if let Some(owner) = owner_at.get(layer.name.as_str()) {
                record(owner, out);
            }
        })?;
    }
    let activations: BTreeMap<String, QuantParams> = ranges
        .into_iter()
        .map(|(k, (lo, hi))| (k, QuantParams::asymmetric(lo, hi)))
        .collect();

    let mut tensors = BTreeMap::new();
    for e in &sched {
        if !matches!(e.op, Op::Conv { .. } | Op::Dense) {
            continue;
        }
        let n = &e.name;
        let w = folded.require(&format!("{n}.weight"))?;
        let b = folded.require(&format!("{n}.bias"))?;
        let wp = QuantParams::symmetric(w.max_abs());
        let codes: Vec<i8> = w.data().iter().map(|&v| wp.quantize(v)).collect();
        let s_in = activations
            .get(&e.input_act)
            .ok_or_else(|| QuantError::MissingActivation(e.input_act.clone()))?
            .scale;
        let bias_scale = f64::from(s_in) * f64::from(wp.scale);
        let bias_codes: Vec<i32> = b
            .data()
            .iter()
            .map(|&v| (f64::from(v) / bias_scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
            .collect();
        tensors.insert(
            format!("{n}.weight"),
            QTensor {
                shape: w.shape().to_vec(),
                params: wp,
                data: QData::I8(codes),
            },
        );
        tensors.insert(
            format!("{n}.bias"),
            QTensor {
                shape: b.shape().to_vec(),
                params: QuantParams {
                    scale: bias_scale as f32,
                    zero_point: 0,
                },
                data: QData::I32(bias_codes),
            },
        );
    }
    Ok(QuantizedModel {
        spec: spec.clone(),
        tensors,
        activations,
    })
}

/// Float parameters rebuilt from the int8 codes (BN already folded).
pub fn dequantized_params(model: &QuantizedModel) -> Params {
    let mut out = Params::default();
    for (name, t) in &model.tensors {
        let data: Vec<f32> = match &t.data {
            QData::F32(v) => v.clone(),
            QData::I8(v) => v.iter().map(|&q| t.params.dequantize(q)).collect(),
            QData::I32(v) => v.iter().map(|&q| (f64::from(q) * f64::from(t.params.scale)) as f32).collect(),
        };
        out.insert(name.clone(), Tensor::new(&t.shape, data).expect("stored shape"));
    }
    out
}
