//! Ten-window clip evaluation and bootstrap confidence intervals.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bc::padded_window;
use super::TrainError;
use crate::data::{LabeledClip, PCM_SCALE};
use crate::model::{predict, Params};
use crate::net::NetworkSpec;
use crate::tensor::Tensor;

pub const CROPS: usize = 10;
pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const Z_95: f64 = 1.96;

/// Spacing of the ten evaluation windows over a clip padded by `T/2` per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CropStride {
    /// `floor(k·(padded_len − T)/9)`: first window at 0, last ending at the padded end.
    #[default]
    Span,
    /// `k·floor(T/9)`: fixed interval regardless of clip length.
    Literal,
}

impl CropStride {
    pub fn starts(self, len: usize, t: usize) -> Result<Vec<usize>, TrainError> {
        let padded = len + 2 * (t / 2);
        if padded < t {
            return Err(TrainError::ClipTooShort { len, t });
        }
        let last = (CROPS - 1) as u64;
        Ok((0..CROPS as u64)
            .map(|k| match self {
                CropStride::Span => (k * (padded - t) as u64 / last) as usize,
                CropStride::Literal => (k as usize * (t / 9)).min(padded - t),
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Whether each clip was classified correctly, in input order.
    pub correct: Vec<bool>,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl EvalReport {
    pub fn from_predictions(labels: &[usize], predicted: &[usize], n_cls: usize, seed: u64) -> Self {
        let mut confusion = vec![vec![0; n_cls]; n_cls];
        let correct: Vec<bool> = labels.iter().zip(predicted).map(|(a, b)| a == b).collect();
        for (&a, &b) in labels.iter().zip(predicted) {
            confusion[a][b] += 1;
        }
        let hits = correct.iter().filter(|&&c| c).count();
        let accuracy = if labels.is_empty() { 0.0 } else { hits as f64 / labels.len() as f64 };
        let (ci_low, ci_high) = if labels.is_empty() {
            (0.0, 0.0)
        } else {
            bootstrap_interval(&correct, BOOTSTRAP_RESAMPLES, Z_95, seed)
        };
        Self {
            accuracy,
            confusion,
            correct,
            ci_low,
            ci_high,
        }
    }
}

/// Averages softmax outputs over the ten windows of each clip and takes the argmax.
pub fn ten_crop_predict(
    spec: &NetworkSpec,
    params: &Params,
    clips: &[&LabeledClip],
    stride: CropStride,
) -> Result<Vec<usize>, TrainError> {
    const CLIPS_PER_BATCH: usize = 8;
    let t = spec.i_len;
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(CLIPS_PER_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * CROPS * t);
        for clip in chunk {
            for s in stride.starts(clip.samples.len(), t)? {
                data.extend(padded_window(&clip.samples, t, s).into_iter().map(|v| (v / PCM_SCALE) as f32));
            }
        }
        let x = Tensor::new(&[chunk.len() * CROPS, 1, 1, t], data).expect("window count matches");
        let probs = predict(spec, params, &x)?;
        let m = spec.n_cls;
        for rows in probs.data().chunks(CROPS * m) {
            let mut mean = vec![0.0f64; m];
            for row in rows.chunks(m) {
                for (acc, &p) in mean.iter_mut().zip(row) {
                    *acc += f64::from(p);
                }
            }
            out.push(argmax(&mean));
        }
    }
    Ok(out)
}

/// First index of the maximum.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn ten_crop_eval(
    spec: &NetworkSpec,
    params: &Params,
    clips: &[&LabeledClip],
    stride: CropStride,
) -> Result<EvalReport, TrainError> {
    let predicted = ten_crop_predict(spec, params, clips, stride)?;
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    Ok(EvalReport::from_predictions(&labels, &predicted, spec.n_cls, 0))
}

/// `μ ± Z·σ/√N` over per-trial accuracies, σ being the population standard deviation.
pub fn bootstrap_ci(accuracies: &[f64], z: f64) -> (f64, f64) {
    let n = accuracies.len() as f64;
    if accuracies.is_empty() {
        return (0.0, 0.0);
    }
    // shifted by the first trial so constant input gives exactly zero spread
    let a0 = accuracies[0];
    let d_mean = accuracies.iter().map(|a| a - a0).sum::<f64>() / n;
    let var = accuracies.iter().map(|a| (a - a0 - d_mean).powi(2)).sum::<f64>() / n;
    let mu = a0 + d_mean;
    let half = z * var.sqrt() / n.sqrt();
    (mu - half, mu + half)
}

/// Accuracies of `resamples` balanced bootstrap resamples of the outcomes:
/// every outcome is drawn exactly `resamples` times overall, so the mean of
/// the resample accuracies equals the plain accuracy.
pub fn bootstrap_accuracies(correct: &[bool], resamples: usize, seed: u64) -> Vec<f64> {
    let n = correct.len();
    let mut pool: Vec<usize> = (0..resamples).flat_map(|_| 0..n).collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pool.chunks(n.max(1))
        .map(|c| c.iter().filter(|&&i| correct[i]).count() as f64 / n as f64)
        .collect()
}

/// Balanced-bootstrap interval; the mean and spread come from integer hit
/// counts so the interval always contains the plain accuracy.
pub fn bootstrap_interval(correct: &[bool], resamples: usize, z: f64, seed: u64) -> (f64, f64) {
    let n = correct.len();
    if n == 0 || resamples == 0 {
        return (0.0, 0.0);
    }
    let mut pool: Vec<usize> = (0..resamples).flat_map(|_| 0..n).collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let hits: Vec<u64> = pool
        .chunks(n)
        .map(|c| c.iter().filter(|&&i| correct[i]).count() as u64)
        .collect();
    let total: u64 = hits.iter().sum();
    let sq: u64 = hits.iter().map(|h| h * h).sum();
    let r = resamples as f64;
    let mu = total as f64 / (r * n as f64);
    // population variance of hit counts, exact up to the final division
    let var_counts = (r * sq as f64 - (total as f64).powi(2)) / (r * r);
    let sigma = var_counts.max(0.0).sqrt() / n as f64;
    let half = z * sigma / r.sqrt();
    (mu - half, mu + half)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn span_windows_cover_padded_clip() {
        // exact-length clip: padded length 2T, stride floor(T/9)
        let t = 900;
        let s = CropStride::Span.starts(t, t).unwrap();
        assert_eq!(s[0], 0);
        assert_eq!(s[9] + t, 2 * t);
        for k in 0..10 {
            assert_eq!(s[k], k * 100);
        }
        let lit = CropStride::Literal.starts(t, t).unwrap();
        assert_eq!(lit, s);
        assert!(CropStride::Span.starts(0, 3).is_err());
    }

    #[test]
    fn literal_stride_ignores_clip_length() {
        let s = CropStride::Literal.starts(10_000, 90).unwrap();
        assert_eq!(s[9], 90);
        let span = CropStride::Span.starts(10_000, 90).unwrap();
        assert_eq!(span[9], 10_000);
    }

    #[test]
    fn constant_accuracies_give_zero_width() {
        for v in [0.8, 0.83, 1.0 / 3.0] {
            assert_eq!(bootstrap_ci(&[v; 1000], Z_95), (v, v));
        }
    }

    #[test]
    fn half_width_closed_form() {
        // μ = 0.8365, σ = 0.01, N = 1000: alternate μ ± σ
        let acc: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 0.8465 } else { 0.8265 }).collect();
        let (lo, hi) = bootstrap_ci(&acc, Z_95);
        let expected = 1.96 * 0.01 / 1000f64.sqrt();
        assert!(((hi - lo) / 2.0 - expected).abs() < 1e-9);
        assert!((expected - 0.00062).abs() < 1e-5);
    }

    #[test]
    fn interval_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let acc: Vec<f64> = (0..1000).map(|_| rng.random_range(0.7..0.9)).collect();
        let mut sum = 0.0;
        for a in &acc {
            sum += a;
        }
        let mu = sum / 1000.0;
        let mut ss = 0.0;
        for a in &acc {
            ss += (a - mu) * (a - mu);
        }
        let half = 1.96 * (ss / 1000.0).sqrt() / 1000f64.sqrt();
        let (lo, hi) = bootstrap_ci(&acc, 1.96);
        assert!((lo - (mu - half)).abs() < 1e-12 && (hi - (mu + half)).abs() < 1e-12);
    }

    #[test]
    fn balanced_resamples_keep_the_mean() {
        let correct: Vec<bool> = (0..37).map(|i| i % 3 != 0).collect();
        let acc = bootstrap_accuracies(&correct, 1000, 4);
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        assert!((mean - 24.0 / 37.0).abs() < 1e-12);
        let (lo, hi) = bootstrap_interval(&correct, 1000, Z_95, 4);
        let (blo, bhi) = bootstrap_ci(&acc, Z_95);
        assert!((lo - blo).abs() < 1e-12 && (hi - bhi).abs() < 1e-12);
        assert!(lo <= 24.0 / 37.0 && 24.0 / 37.0 <= hi);
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }
}
