//! Seeded weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tensor};

/// Fan-in of a conv (`C·kh·kw`) or dense (`in`) weight shape.
pub fn fan_in(shape: &[usize]) -> usize {
    shape.iter().skip(1).product::<usize>().max(1)
}

/// Samples `N(0, 2 / fan_in)`; identical seeds give identical tensors.
pub fn he_normal_init<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let std = (2.0 / fan_in(shape) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::lit(normal.sample(&mut rng)))
}

/// Stable 64-bit mix used to derive per-tensor and per-step seeds.
pub fn derive_seed(seed: u64, salt: &str) -> u64 {
    // FNV-1a over the salt, then a splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in salt.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_matches_fan_in() {
        // dense [1250, 8]: fan_in 8, variance 0.25
        let t: Tensor<f64> = he_normal_init(&[1250, 8], 42);
        assert_eq!(t.len(), 10_000);
        let mean = t.sum() / t.len() as f64;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64;
        assert!((var - 0.25).abs() < 0.025, "variance {var}");
    }

    #[test]
    fn seeding_is_deterministic() {
        let a: Tensor<f32> = he_normal_init(&[4, 2, 3, 3], 7);
        let b: Tensor<f32> = he_normal_init(&[4, 2, 3, 3], 7);
        let c: Tensor<f32> = he_normal_init(&[4, 2, 3, 3], 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn derived_seeds_differ_by_salt() {
        assert_ne!(derive_seed(1, "conv1.weight"), derive_seed(1, "conv2.weight"));
        assert_eq!(derive_seed(1, "x"), derive_seed(1, "x"));
    }
}
