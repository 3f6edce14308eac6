//! Band-limited noise toy dataset and a nearest-centroid spectral baseline.

use std::f64::consts::TAU;

use acdnet_core::data::{Dataset, LabeledClip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub const SYNTH_FOLDS: usize = 5;

/// Passband of class `k`: the upper three quarters of the k-th slot of
/// `[0, 0.4·sr]`, so neighbouring bands never touch.
pub fn class_band(k: usize, n_cls: usize, sr: usize) -> (f64, f64) {
    let unit = 0.4 * sr as f64 / n_cls as f64;
    (k as f64 * unit + 0.25 * unit, (k + 1) as f64 * unit)
}

/// White Gaussian noise with every FFT bin outside `[lo, hi]` Hz removed,
/// scaled to unit peak.
pub fn band_noise(len: usize, sr: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..len)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (i, c) in buf.iter_mut().enumerate() {
        let f = i.min(len - i) as f64 * sr as f64 / len as f64;
        if f < lo || f > hi {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter().map(|v| v / peak).collect()
    } else {
        out
    }
}

/// `n_cls` classes of band-limited noise under a slow random amplitude
/// envelope. Folds are stratified: the j-th clip of every class goes to
/// fold `j mod 5 + 1`.
pub fn make_synthetic_dataset(n_cls: usize, clips_per_class: usize, sr: usize, len: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips = Vec::with_capacity(n_cls * clips_per_class);
    let mut folds = Vec::with_capacity(n_cls * clips_per_class);
    for j in 0..clips_per_class {
        for label in 0..n_cls {
            let (lo, hi) = class_band(label, n_cls, sr);
            let noise = band_noise(len, sr, lo, hi, &mut rng);
            let amp: f64 = rng.random_range(2_000.0..16_000.0);
            let env_hz: f64 = rng.random_range(0.5..2.0);
            let phase: f64 = rng.random_range(0.0..TAU);
            let samples = noise
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let env = 0.6 + 0.4 * (TAU * env_hz * i as f64 / sr as f64 + phase).sin();
                    (amp * env * v).round() as f32
                })
                .collect();
            clips.push(LabeledClip { samples, label, sr });
            folds.push(j % SYNTH_FOLDS + 1);
        }
    }
    let names = (0..n_cls).map(|k| format!("band{k}")).collect();
    Dataset::new(clips, folds, names).expect("synthetic clips are in range")
}

/// Log energy in `bins` equal-width bands spanning `[0, sr/2]`.
pub fn spectral_features(samples: &[f32], bins: usize) -> Vec<f64> {
    let n = samples.len();
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&v| Complex::new(f64::from(v), 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2 + 1;
    let mut feats = vec![0.0; bins];
    for (i, c) in buf.iter().take(half).enumerate() {
        feats[(i * bins / half).min(bins - 1)] += c.norm_sqr();
    }
    let total: f64 = feats.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    feats.iter().map(|e| (e / total + 1e-12).ln()).collect()
}

/// Mean cross-validated accuracy of a nearest-centroid classifier on
/// spectral features, each fold tested once.
pub fn nearest_centroid_accuracy(ds: &Dataset, bins: usize) -> f64 {
    let feats: Vec<Vec<f64>> = ds.clips.iter().map(|c| spectral_features(&c.samples, bins)).collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for fold in ds.fold_ids() {
        let Ok((train, test)) = ds.split(fold) else { continue };
        let mut centroids = vec![vec![0.0; bins]; ds.n_cls()];
        let mut counts = vec![0usize; ds.n_cls()];
        for &i in &train {
            let l = ds.clips[i].label;
            counts[l] += 1;
            for (c, f) in centroids[l].iter_mut().zip(&feats[i]) {
                *c += f;
            }
        }
        for (c, &n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        }
        for &i in &test {
            let dist = |c: &Vec<f64>| c.iter().zip(&feats[i]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..ds.n_cls())
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap_or(0);
            hits += usize::from(best == ds.clips[i].label);
            total += 1;
        }
    }
    hits as f64 / total.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_stratified_folds() {
        let ds = make_synthetic_dataset(4, 50, 2000, 1000, 1);
        assert_eq!(ds.len(), 200);
        for fold in 1..=5 {
            for label in 0..4 {
                let n = (0..ds.len())
                    .filter(|&i| ds.folds[i] == fold && ds.clips[i].label == label)
                    .count();
                assert_eq!(n, 10);
            }
        }
    }

    #[test]
    fn bands_are_disjoint_and_below_nyquist() {
        for n in 1..10 {
            for k in 0..n {
                let (lo, hi) = class_band(k, n, 2000);
                assert!(lo < hi && hi <= 800.0);
                if k + 1 < n {
                    assert!(hi < class_band(k + 1, n, 2000).0);
                }
            }
        }
        assert_eq!(class_band(0, 4, 2000), (50.0, 200.0));
        assert_eq!(class_band(3, 4, 2000), (650.0, 800.0));
    }

    #[test]
    fn noise_energy_stays_in_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f32> = band_noise(2000, 2000, 250.0, 400.0, &mut rng).iter().map(|&v| v as f32).collect();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(f64::from(v), 0.0)).collect();
        FftPlanner::new().plan_fft_forward(2000).process(&mut buf);
        let (mut inside, mut all) = (0.0, 0.0);
        for (i, c) in buf.iter().take(1001).enumerate() {
            all += c.norm_sqr();
            if (250..=400).contains(&i) {
                inside += c.norm_sqr();
            }
        }
        assert!(inside / all > 0.999);
    }

    #[test]
    fn seeds_change_waveforms_not_structure() {
        let a = make_synthetic_dataset(3, 5, 2000, 500, 1);
        let b = make_synthetic_dataset(3, 5, 2000, 500, 2);
        assert_ne!(a.clips[0].samples, b.clips[0].samples);
        assert_eq!(a.folds, b.folds);
        let labels = |d: &Dataset| d.clips.iter().map(|c| c.label).collect::<Vec<_>>();
        assert_eq!(labels(&a), labels(&b));
        assert_eq!(make_synthetic_dataset(3, 5, 2000, 500, 1), a);
    }
}
