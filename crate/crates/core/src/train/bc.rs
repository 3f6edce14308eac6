//! Between-class mixing of two clips from different classes.

use rand::Rng;

use super::TrainError;
use crate::data::{LabeledClip, PCM_SCALE};

/// Gain assigned to an all-zero crop.
pub const GAIN_FLOOR_DB: f64 = -80.0;

/// Mixing weight of the first sound given the crop gains (dB) and a ratio
/// `r` in (0, 1): `1 / (1 + 10^((g1 - g2)/20) · (1 - r)/r)`.
pub fn mix_ratio(g1: f64, g2: f64, r: f64) -> Result<f64, TrainError> {
    if !(r > 0.0 && r < 1.0) {
        return Err(TrainError::Ratio(r));
    }
    Ok(1.0 / (1.0 + 10f64.powf((g1 - g2) / 20.0) * (1.0 - r) / r))
}

/// `(p·s1 + (1-p)·s2) / sqrt(p² + (1-p)²)`.
pub fn bc_mix(s1: &[f64], s2: &[f64], p: f64) -> Vec<f64> {
    let norm = (p * p + (1.0 - p) * (1.0 - p)).sqrt();
    s1.iter().zip(s2).map(|(a, b)| (p * a + (1.0 - p) * b) / norm).collect()
}

/// Peak level of a crop in dB relative to 16-bit full scale, floored.
pub fn crop_gain_db(s: &[f64]) -> f64 {
    let peak = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        GAIN_FLOOR_DB
    } else {
        (20.0 * (peak / PCM_SCALE).log10()).max(GAIN_FLOOR_DB)
    }
}

/// Window `[start, start + t)` of the clip zero-padded by `t/2` on each side.
pub fn padded_window(samples: &[f32], t: usize, start: usize) -> Vec<f64> {
    let pad = t / 2;
    (start..start + t)
        .map(|i| {
            if i < pad || i - pad >= samples.len() {
                0.0
            } else {
                f64::from(samples[i - pad])
            }
        })
        .collect()
}

/// Number of valid window starts of a padded clip.
pub fn window_starts(len: usize, t: usize) -> Result<usize, TrainError> {
    let padded = len + 2 * (t / 2);
    if padded < t {
        return Err(TrainError::ClipTooShort { len, t });
    }
    Ok(padded - t + 1)
}

/// Mixes two fixed crops with ratio `r`. Returns the waveform divided by
/// 32768 and the mixing weight `p` of the first crop.
pub fn mix_crops(a: &[f64], b: &[f64], r: f64) -> Result<(Vec<f32>, f64), TrainError> {
    let p = mix_ratio(crop_gain_db(a), crop_gain_db(b), r)?;
    let wave = bc_mix(a, b, p).into_iter().map(|v| (v / PCM_SCALE) as f32).collect();
    Ok((wave, p))
}

/// A training input of length `t` and its soft label over `n_cls` classes.
pub fn make_training_example(
    a: &LabeledClip,
    b: &LabeledClip,
    t: usize,
    n_cls: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<f32>, Vec<f32>), TrainError> {
    if a.label == b.label {
        return Err(TrainError::SameLabel(a.label));
    }
    let ra = window_starts(a.samples.len(), t)?;
    let rb = window_starts(b.samples.len(), t)?;
    let crop_a = padded_window(&a.samples, t, rng.random_range(0..ra));
    let crop_b = padded_window(&b.samples, t, rng.random_range(0..rb));
    // open interval (0, 1)
    let r = loop {
        let r: f64 = rng.random();
        if r > 0.0 {
            break r;
        }
    };
    let (wave, p) = mix_crops(&crop_a, &crop_b, r)?;
    let mut label = vec![0.0f32; n_cls];
    label[a.label] = p as f32;
    label[b.label] = (1.0 - p) as f32;
    Ok((wave, label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ratio_examples() {
        assert!((mix_ratio(-10.0, -10.0, 0.5).unwrap() - 0.5).abs() < 1e-12);
        assert!((mix_ratio(20.0, 0.0, 0.5).unwrap() - 1.0 / 11.0).abs() < 1e-12);
        assert!(mix_ratio(0.0, 0.0, 1.0 - 1e-12).unwrap() > 1.0 - 1e-9);
        assert!(mix_ratio(0.0, 0.0, 0.0).is_err());
        assert!(mix_ratio(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn ratio_complement_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (g1, g2) = (rng.random_range(-80.0..0.0), rng.random_range(-80.0..0.0));
            let r: f64 = rng.random_range(0.01..0.99);
            let p = mix_ratio(g1, g2, r).unwrap();
            let q = mix_ratio(g2, g1, 1.0 - r).unwrap();
            assert!((p + q - 1.0).abs() < 1e-9);
            assert!(mix_ratio(g1, g2, r + 0.005).unwrap() > p);
            assert!(mix_ratio(g1 + 1.0, g2, r).unwrap() < p);
        }
    }

    #[test]
    fn mix_closed_forms() {
        let s1 = [1.0, -2.0, 3.0];
        let s2 = [0.5, 0.5, -1.0];
        let half = bc_mix(&s1, &s2, 0.5);
        for i in 0..3 {
            assert!((half[i] - (s1[i] + s2[i]) / 2f64.sqrt()).abs() < 1e-12);
        }
        assert_eq!(bc_mix(&s1, &s2, 1.0), s1.to_vec());
    }

    #[test]
    fn mix_preserves_unit_energy_of_orthogonal_pair() {
        let n = 64;
        let s1: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 3.0 * i as f64 / n as f64).sin()).collect();
        let s2: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 5.0 * i as f64 / n as f64).cos()).collect();
        let unit = |s: &[f64]| {
            let e = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            s.iter().map(|v| v / e).collect::<Vec<_>>()
        };
        let (s1, s2) = (unit(&s1), unit(&s2));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p: f64 = rng.random();
            let e: f64 = bc_mix(&s1, &s2, p).iter().map(|v| v * v).sum();
            assert!((e - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_clips_at_even_ratio_give_even_label() {
        let crop: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin() * 1000.0).collect();
        let (_, p) = mix_crops(&crop, &crop, 0.5).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn silent_partner_uses_gain_floor() {
        let loud: Vec<f64> = vec![32_768.0; 10];
        let silent = vec![0.0; 10];
        assert_eq!(crop_gain_db(&silent), GAIN_FLOOR_DB);
        let (_, p) = mix_crops(&loud, &silent, 0.5).unwrap();
        // g1 - g2 = 0 - (-80) = 80 dB
        assert!((p - 1.0 / (1.0 + 1e4)).abs() < 1e-12);
    }

    #[test]
    fn soft_labels_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = LabeledClip {
            samples: (0..300).map(|i| ((i * 7) % 100) as f32 * 100.0 - 5000.0).collect(),
            label: 0,
            sr: 100,
        };
        let b = LabeledClip {
            samples: (0..250).map(|i| ((i * 13) % 50) as f32 * 30.0).collect(),
            label: 2,
            sr: 100,
        };
        for _ in 0..1000 {
            let (x, y) = make_training_example(&a, &b, 200, 3, &mut rng).unwrap();
            assert_eq!(x.len(), 200);
            assert!(y.iter().all(|&v| v >= 0.0));
            assert!((y.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert!(matches!(
            make_training_example(&a, &a, 200, 3, &mut rng),
            Err(TrainError::SameLabel(0))
        ));
    }

    #[test]
    fn padded_window_offsets() {
        let s = [1.0f32, 2.0, 3.0, 4.0];
        assert_eq!(padded_window(&s, 4, 0), vec![0.0, 0.0, 1.0, 2.0]);
        assert_eq!(padded_window(&s, 4, 4), vec![3.0, 4.0, 0.0, 0.0]);
        assert_eq!(window_starts(4, 4).unwrap(), 5);
        assert!(window_starts(0, 3).is_err());
    }
}
