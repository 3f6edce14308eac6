//! Global magnitude sparsification over all conv and dense weights.

use std::cmp::Ordering;

use crate::model::{is_weight, Params};
use crate::tensor::Tensor;
use crate::train::{apply_mask, Mask};

use super::CompressError;

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityMask {
    /// 1 keeps a weight, 0 zeroes it.
    pub masks: Mask,
    pub target_fraction: f64,
}

impl SparsityMask {
    pub fn zeroed(&self) -> usize {
        self.masks.values().map(|m| m.data().iter().filter(|&&v| v == 0.0).count()).sum()
    }

    pub fn total(&self) -> usize {
        self.masks.values().map(Tensor::len).sum()
    }
}

/// Number of weights zeroed for `fraction` of `total`: `ceil(fraction·total)`,
/// ignoring float noise just above an integer.
pub fn sparsify_count(total: usize, fraction: f64) -> usize {
    let exact = fraction * total as f64;
    let nearest = exact.round();
    if (exact - nearest).abs() < 1e-9 * total.max(1) as f64 {
        nearest as usize
    } else {
        exact.ceil() as usize
    }
    .min(total)
}

/// Zeroes the `ceil(fraction·W)` smallest-magnitude weights. Ties go to
/// the earlier tensor (name order) and the earlier index.
pub fn sparsify_global(params: &Params, fraction: f64) -> Result<(Params, SparsityMask), CompressError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CompressError::Config(format!("sparsify fraction {fraction} outside [0, 1)")));
    }
    let weights: Vec<(&str, &Tensor<f32>)> = params.iter().filter(|(n, _)| is_weight(n)).collect();
    let mut order: Vec<(f32, usize, usize)> = weights
        .iter()
        .enumerate()
        .flat_map(|(t, (_, w))| w.data().iter().enumerate().map(move |(i, v)| (v.abs(), t, i)))
        .collect();
    let k = sparsify_count(order.len(), fraction);
    let cmp = |a: &(f32, usize, usize), b: &(f32, usize, usize)| {
        a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then((a.1, a.2).cmp(&(b.1, b.2)))
    };
    let mut masks: Vec<Tensor<f32>> = weights.iter().map(|(_, w)| Tensor::ones(w.shape())).collect();
    if k > 0 {
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        for &(_, t, i) in &order[..k] {
            masks[t].data_mut()[i] = 0.0;
        }
    }
    let mask = SparsityMask {
        masks: weights.iter().map(|(n, _)| n.to_string()).zip(masks).collect(),
        target_fraction: fraction,
    };
    let mut out = params.clone();
    apply_mask(&mut out, &mask.masks);
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: Vec<f32>) -> Params {
        let mut p = Params::default();
        let n = w.len();
        p.insert("conv3.weight", Tensor::new(&[n], w).unwrap());
        p.insert("conv3.bias", Tensor::new(&[1], vec![0.001]).unwrap());
        p
    }

    #[test]
    fn zeroes_two_smallest() {
        let (out, mask) = sparsify_global(&single(vec![0.1, -0.5, 0.02, 0.9, -0.3]), 0.4).unwrap();
        assert_eq!(out.get("conv3.weight").unwrap().data(), &[0.0, -0.5, 0.0, 0.9, -0.3]);
        assert_eq!(out.get("conv3.bias").unwrap().data(), &[0.001]);
        assert_eq!(mask.zeroed(), 2);
    }

    #[test]
    fn zero_fraction_is_identity() {
        let p = single(vec![0.1, -0.5, 0.0]);
        let (out, mask) = sparsify_global(&p, 0.0).unwrap();
        assert_eq!(out, p);
        assert_eq!(mask.zeroed(), 0);
    }

    #[test]
    fn rejects_full_sparsity() {
        assert!(sparsify_global(&single(vec![1.0]), 1.0).is_err());
    }

    #[test]
    fn count_rounds_up_except_float_noise() {
        assert_eq!(sparsify_count(10_000, 0.95), 9_500);
        assert_eq!(sparsify_count(10, 0.95), 10);
        assert_eq!(sparsify_count(7, 0.5), 4);
        assert_eq!(sparsify_count(100, 0.07), 7);
    }

    #[test]
    fn ties_prefer_earlier_entries() {
        let (out, _) = sparsify_global(&single(vec![0.5, 0.5, 0.5, 0.5]), 0.5).unwrap();
        assert_eq!(out.get("conv3.weight").unwrap().data(), &[0.0, 0.0, 0.5, 0.5]);
    }
}
