//! Windowed-sinc polyphase sample-rate conversion.

use std::f64::consts::PI;

use acdnet_core::data::LabeledClip;

/// Zero crossings of the sinc kept on each side of the centre tap.
const ZERO_CROSSINGS: f64 = 16.0;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.95;
/// Phase counts up to this size get precomputed filter tables.
const MAX_TABLE_PHASES: usize = 1024;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `round(len · target / src)`.
pub fn output_len(len: usize, src: usize, target: usize) -> usize {
    ((len as u128 * target as u128 * 2 + src as u128) / (2 * src as u128)) as usize
}

fn blackman(x: f64) -> f64 {
    // x in [-1, 1]
    let a = PI * (x + 1.0);
    0.42 - 0.5 * a.cos() + 0.08 * (2.0 * a).cos()
}

struct Kernel {
    up: usize,
    fc: f64,
    half: isize,
}

impl Kernel {
    /// Taps for output phase `phase / up`, normalized to unit sum.
    fn taps(&self, phase: usize) -> Vec<f64> {
        let frac = phase as f64 / self.up as f64;
        let mut h: Vec<f64> = (-self.half + 1..=self.half)
            .map(|k| {
                let d = k as f64 - frac;
                let x = 2.0 * self.fc * d;
                let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
                let w = (d / (self.half as f64 + 1.0)).clamp(-1.0, 1.0);
                2.0 * self.fc * sinc * blackman(w)
            })
            .collect();
        let sum: f64 = h.iter().sum();
        h.iter_mut().for_each(|v| *v /= sum);
        h
    }
}

/// Resamples `x` from `src` to `target` Hz. Output sample `n` sits at input
/// time `n · src / target`; samples beyond either end repeat the edge value.
pub fn resample_samples(x: &[f32], src: usize, target: usize) -> Vec<f32> {
    assert!(src > 0 && target > 0, "sample rates must be positive");
    if src == target || x.is_empty() {
        return x.to_vec();
    }
    let g = gcd(src, target);
    let (up, down) = (target / g, src / g);
    let fc = 0.5 * ROLLOFF * (target as f64 / src as f64).min(1.0);
    let half = (ZERO_CROSSINGS / (2.0 * fc)).ceil() as isize;
    let kernel = Kernel { up, fc, half };
    let table: Option<Vec<Vec<f64>>> = (up <= MAX_TABLE_PHASES).then(|| (0..up).map(|p| kernel.taps(p)).collect());
    let last = x.len() as isize - 1;
    (0..output_len(x.len(), src, target))
        .map(|n| {
            let pos = n as u128 * down as u128;
            let i0 = (pos / up as u128) as isize;
            let phase = (pos % up as u128) as usize;
            let owned;
            let taps = match &table {
                Some(t) => &t[phase],
                None => {
                    owned = kernel.taps(phase);
                    &owned
                }
            };
            let mut acc = 0.0;
            for (j, &h) in taps.iter().enumerate() {
                let i = (i0 - half + 1 + j as isize).clamp(0, last);
                acc += h * f64::from(x[i as usize]);
            }
            acc as f32
        })
        .collect()
}

pub fn resample(clip: &LabeledClip, target_sr: usize) -> LabeledClip {
    LabeledClip {
        samples: resample_samples(&clip.samples, clip.sr, target_sr),
        label: clip.label,
        sr: target_sr,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    fn sine(f: f64, sr: usize, n: usize, amp: f64) -> Vec<f32> {
        (0..n).map(|i| (amp * (2.0 * PI * f * i as f64 / sr as f64).sin()) as f32).collect()
    }

    #[test]
    fn identity_is_exact_copy() {
        let clip = LabeledClip {
            samples: vec![1.0, -3.0, 7.5],
            label: 2,
            sr: 8000,
        };
        assert_eq!(resample(&clip, 8000), clip);
    }

    #[test]
    fn lengths_round() {
        assert_eq!(output_len(44_100, 44_100, 20_000), 20_000);
        assert_eq!(output_len(3, 2, 1), 2);
        assert_eq!(output_len(5, 44_100, 20_000), 2);
        for (len, src, dst) in [(1001, 44_100, 20_000), (7, 16_000, 48_000), (12_345, 22_050, 20_000)] {
            let y = resample_samples(&vec![0.5; len], src, dst);
            assert_eq!(y.len(), (len as f64 * dst as f64 / src as f64).round() as usize);
        }
    }

    #[test]
    fn dc_is_preserved() {
        for (src, dst) in [(44_100, 20_000), (16_000, 20_000), (20_000, 20_001)] {
            let y = resample_samples(&vec![1234.0; 3000], src, dst);
            for v in y {
                assert!((f64::from(v) / 1234.0 - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn tone_survives_downsampling() {
        let amp = 10_000.0;
        let y = resample_samples(&sine(100.0, 44_100, 44_100, amp), 44_100, 20_000);
        assert_eq!(y.len(), 20_000);
        let mut buf: Vec<Complex<f64>> = y.iter().map(|&v| Complex::new(f64::from(v), 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        let mags: Vec<f64> = buf[..10_001].iter().map(|c| c.norm()).collect();
        let peak = (0..mags.len()).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
        assert_eq!(peak, 100);
        let measured = 2.0 * mags[100] / y.len() as f64;
        assert!((measured / amp - 1.0).abs() < 0.01, "{measured}");
    }

    #[test]
    fn content_above_new_nyquist_is_removed() {
        let y = resample_samples(&sine(15_000.0, 44_100, 44_100, 10_000.0), 44_100, 20_000);
        let rms = (y[200..y.len() - 200].iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / (y.len() - 400) as f64).sqrt();
        assert!(rms < 10.0, "{rms}");
    }
}
