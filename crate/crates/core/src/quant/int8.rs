//! Integer reference interpreter. The emitted C routine follows the same
//! arithmetic step for step.

use super::schedule::{schedule, Op};
use super::{QuantError, QuantParams, QuantizedModel};
use crate::data::{LabeledClip, PCM_SCALE};
use crate::ops::{self, pool_output_dims};
use crate::tensor::Tensor;
use crate::train::{argmax, padded_window, CropStride, TrainError};

/// `real ≈ multiplier · 2^-shift`, multiplier in `[2^30, 2^31)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requant {
    pub multiplier: i32,
    pub shift: u32,
}

impl Requant {
    pub fn from_real(m: f64) -> Self {
        if !(m > 0.0 && m.is_finite()) {
            return Self { multiplier: 0, shift: 1 };
        }
        let mut e = m.log2().floor() as i32 + 1;
        let mut q = (m / 2f64.powi(e) * 2f64.powi(31)).round() as i64;
        // frac lands in [0.5, 1) up to float slop at the ends
        while q >= 1 << 31 {
            q /= 2;
            e += 1;
        }
        while q < 1 << 30 {
            q *= 2;
            e -= 1;
        }
        let shift = 31 - e;
        if shift > 62 {
            return Self { multiplier: 0, shift: 1 };
        }
        Self {
            multiplier: q as i32,
            shift: shift.max(1) as u32,
        }
    }
}

/// `p / 2^shift` rounded half away from zero.
pub fn round_shift(p: i64, shift: u32) -> i64 {
    let half = 1i64 << (shift - 1);
    if p >= 0 {
        (p + half) >> shift
    } else {
        -((-p + half) >> shift)
    }
}

/// Rescales a 32-bit accumulator: `round(acc · multiplier / 2^shift)`
/// computed on a 64-bit product, saturated to 32 bits.
pub fn requant(acc: i32, r: Requant) -> i32 {
    let v = round_shift(i64::from(acc) * i64::from(r.multiplier), r.shift);
    v.clamp(i64::from(i32::MIN), i64::from(i32::MAX)) as i32
}

fn clamp_i8(v: i32, lo: i32) -> i8 {
    v.clamp(lo.max(-128), 127) as i8
}

/// Integer mean rounded half away from zero.
fn div_round(sum: i32, k: i32) -> i32 {
    if sum >= 0 {
        (2 * sum + k) / (2 * k)
    } else {
        -((-2 * sum + k) / (2 * k))
    }
}

/// Requantization of a conv or dense entry: `s_in · s_w / s_out`.
pub(super) fn layer_requant(model: &QuantizedModel, name: &str, input_act: &str, act: &str) -> Result<Requant, QuantError> {
    let s_in = f64::from(model.activation(input_act)?.scale);
    let s_w = f64::from(model.tensor(&format!("{name}.weight"))?.params.scale);
    let s_out = f64::from(model.activation(act)?.scale);
    Ok(Requant::from_real(s_in * s_w / s_out))
}

pub fn quantize_input(model: &QuantizedModel, x: &[f32]) -> Result<Vec<i8>, QuantError> {
    let p = model.activation("input")?;
    Ok(x.iter().map(|&v| p.quantize(v)).collect())
}

struct Act {
    data: Vec<i8>,
    c: usize,
    h: usize,
    w: usize,
}

#[allow(clippy::too_many_arguments)]
fn conv(
    x: &Act,
    wq: &[i8],
    bias: &[i32],
    f: usize,
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    zp_in: i32,
    zp_out: i32,
    lo: i32,
    r: Requant,
) -> Act {
    let oh = (x.h + 2 * ph - kh) / sh + 1;
    let ow = (x.w + 2 * pw - kw) / sw + 1;
    let xs: Vec<i32> = x.data.iter().map(|&v| i32::from(v) - zp_in).collect();
    let mut out = vec![0i8; f * oh * ow];
    let mut acc = vec![0i32; ow];
    for fi in 0..f {
        for oy in 0..oh {
            acc.fill(bias[fi]);
            for ci in 0..x.c {
                for ki in 0..kh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let row = &xs[(ci * x.h + iy as usize) * x.w..][..x.w];
                    for kj in 0..kw {
                        let wv = i32::from(wq[((fi * x.c + ci) * kh + ki) * kw + kj]);
                        if wv == 0 {
                            continue;
                        }
                        // ox with 0 <= ox*sw + kj - pw < w
                        let first = (pw.saturating_sub(kj)).div_ceil(sw);
                        let last = if x.w + pw > kj { (x.w + pw - kj - 1) / sw + 1 } else { 0 };
                        for (ox, a) in acc.iter_mut().enumerate().take(last.min(ow)).skip(first) {
                            *a += row[ox * sw + kj - pw] * wv;
                        }
                    }
                }
            }
            let o = &mut out[(fi * oh + oy) * ow..][..ow];
            for (ov, &a) in o.iter_mut().zip(&acc) {
                *ov = clamp_i8(requant(a, r).saturating_add(zp_out), lo);
            }
        }
    }
    Act { data: out, c: f, h: oh, w: ow }
}

fn pool(x: &Act, (kh, kw): (usize, usize), avg: bool, zp: i32) -> Result<Act, QuantError> {
    let op = if avg { "avgpool" } else { "maxpool" };
    let (oh, ow) = pool_output_dims(op, (x.h, x.w), (kh, kw)).map_err(|source| QuantError::Model(crate::model::ModelError::Op {
        layer: "pool".into(),
        source,
    }))?;
    let mut out = Vec::with_capacity(x.c * oh * ow);
    for ci in 0..x.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = i8::MIN;
                let mut sum = 0i32;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let v = x.data[(ci * x.h + oy * kh + ki) * x.w + ox * kw + kj];
                        best = best.max(v);
                        sum += i32::from(v) - zp;
                    }
                }
                out.push(if avg {
                    clamp_i8(div_round(sum, (kh * kw) as i32) + zp, -128)
                } else {
                    best
                });
            }
        }
    }
    Ok(Act { data: out, c: x.c, h: oh, w: ow })
}

/// Logit codes of one input window given as int8 codes.
pub fn int8_logits(model: &QuantizedModel, input: &[i8]) -> Result<Vec<i8>, QuantError> {
    let t = model.spec.i_len;
    if input.len() != t {
        return Err(QuantError::InputLength {
            expected: t,
            found: input.len(),
        });
    }
    let mut x = Act {
        data: input.to_vec(),
        c: 1,
        h: 1,
        w: t,
    };
    for e in schedule(&model.spec) {
        x = match e.op {
            Op::Conv { stride, padding, relu } => {
                let wt = model.tensor(&format!("{}.weight", e.name))?;
                let (f, kh, kw) = (wt.shape[0], wt.shape[2], wt.shape[3]);
                let zp_in = model.activation(&e.input_act)?.zero_point;
                let out = model.activation(&e.act)?;
                let lo = if relu { out.zero_point } else { -128 };
                let r = layer_requant(model, &e.name, &e.input_act, &e.act)?;
                let (wq, bias) = (model.weight_codes(&e.name)?, model.bias_codes(&e.name)?);
                conv(&x, wq, bias, f, (kh, kw), stride, padding, zp_in, out.zero_point, lo, r)
            }
            Op::Folded | Op::Flatten | Op::Softmax => x,
            Op::MaxPool { kernel } => pool(&x, kernel, false, 0)?,
            Op::AvgPool { kernel } => pool(&x, kernel, true, model.activation(&e.act)?.zero_point)?,
            Op::SwapAxes => {
                let mut out = Vec::with_capacity(x.data.len());
                for hi in 0..x.h {
                    for ci in 0..x.c {
                        out.extend_from_slice(&x.data[(ci * x.h + hi) * x.w..][..x.w]);
                    }
                }
                Act {
                    data: out,
                    c: x.h,
                    h: x.c,
                    w: x.w,
                }
            }
            Op::Dense => {
                let wt = model.tensor(&format!("{}.weight", e.name))?;
                let units = wt.shape[0];
                let n_in = x.data.len();
                let zp_in = model.activation(&e.input_act)?.zero_point;
                let zp_out = model.activation(&e.act)?.zero_point;
                let r = layer_requant(model, &e.name, &e.input_act, &e.act)?;
                let (wq, bias) = (model.weight_codes(&e.name)?, model.bias_codes(&e.name)?);
                let out = (0..units)
                    .map(|u| {
                        let acc = x.data.iter().zip(&wq[u * n_in..][..n_in]).fold(bias[u], |a, (&xv, &wv)| {
                            a + (i32::from(xv) - zp_in) * i32::from(wv)
                        });
                        clamp_i8(requant(acc, r).saturating_add(zp_out), -128)
                    })
                    .collect();
                Act {
                    data: out,
                    c: units,
                    h: 1,
                    w: 1,
                }
            }
        };
    }
    Ok(x.data)
}

fn logits_params(model: &QuantizedModel) -> Result<QuantParams, QuantError> {
    let act = schedule(&model.spec)
        .into_iter()
        .rev()
        .find(|e| e.op == Op::Dense)
        .map(|e| e.act)
        .unwrap_or_else(|| "input".into());
    model.activation(&act)
}

/// Class probabilities of `[N, 1, 1, T]` float windows: quantized input,
/// integer network, float softmax over the dequantized logits.
pub fn int8_infer(model: &QuantizedModel, x: &Tensor<f32>) -> Result<Tensor<f32>, QuantError> {
    let t = model.spec.i_len;
    let lp = logits_params(model)?;
    let n = x.len() / t.max(1);
    let mut logits = Vec::with_capacity(n * model.spec.n_cls);
    for row in x.data().chunks(t) {
        let q = int8_logits(model, &quantize_input(model, row)?)?;
        logits.extend(q.iter().map(|&v| lp.dequantize(v)));
    }
    let m = logits.len() / n.max(1);
    let l = Tensor::new(&[n, m], logits).expect("logit count");
    ops::softmax(&l).map_err(|source| {
        QuantError::Model(crate::model::ModelError::Op {
            layer: "softmax".into(),
            source,
        })
    })
}

/// Ten-window prediction with the integer network.
pub fn int8_ten_crop_predict(model: &QuantizedModel, clips: &[&LabeledClip], stride: CropStride) -> Result<Vec<usize>, TrainError> {
    let t = model.spec.i_len;
    let mut out = Vec::with_capacity(clips.len());
    for clip in clips {
        let mut windows = Vec::new();
        for s in stride.starts(clip.samples.len(), t)? {
            windows.extend(padded_window(&clip.samples, t, s).into_iter().map(|v| (v / PCM_SCALE) as f32));
        }
        let x = Tensor::new(&[windows.len() / t, 1, 1, t], windows).expect("window count");
        let probs = int8_infer(model, &x).map_err(|e| TrainError::Config(e.to_string()))?;
        let m = probs.shape()[1];
        let mut mean = vec![0.0f64; m];
        for row in probs.data().chunks(m) {
            for (a, &p) in mean.iter_mut().zip(row) {
                *a += f64::from(p);
            }
        }
        out.push(argmax(&mean));
    }
    Ok(out)
}
