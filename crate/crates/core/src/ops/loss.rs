//! Batch-mean losses over probability rows.

use crate::ops::dims2;
use crate::tensor::{Real, Tensor, TensorError};

/// Predictions are clamped below at this value before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;
const ROW_SUM_TOL: f64 = 1e-5;

pub fn validate_probability_rows<T: Real>(op: &'static str, p: &Tensor<T>) -> Result<(), TensorError> {
    let (_, m) = dims2(op, p)?;
    for (i, row) in p.data().chunks(m).enumerate() {
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if row.iter().any(|v| *v < T::zero() || !v.is_finite()) || (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(TensorError::Invalid {
                op,
                reason: format!("row {i} is not a probability vector (sum {sum})"),
            });
        }
    }
    Ok(())
}

fn check_pair<T: Real>(op: &'static str, pred: &Tensor<T>, target: &Tensor<T>) -> Result<(usize, usize), TensorError> {
    let dims = dims2(op, pred)?;
    pred.expect_same_shape(op, target)?;
    validate_probability_rows(op, pred)?;
    validate_probability_rows(op, target)?;
    Ok(dims)
}

fn clamp<T: Real>(f: T) -> T {
    f.max(T::lit(PROB_CLAMP))
}

/// `(1/n) Σ_i Σ_j y_ij log(y_ij / f_ij)`; entries with `y = 0` contribute 0.
pub fn kl_div_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T, TensorError> {
    let (n, _) = check_pair("kl_div_loss", pred, target)?;
    let mut total = T::zero();
    for (&f, &y) in pred.data().iter().zip(target.data()) {
        if y > T::zero() {
            total = total + y * (y.ln() - clamp(f).ln());
        }
    }
    Ok(total / T::count(n))
}

/// `-(1/n) Σ_i Σ_j y_ij log f_ij`.
pub fn cross_entropy_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T, TensorError> {
    let (n, _) = check_pair("cross_entropy_loss", pred, target)?;
    let mut total = T::zero();
    for (&f, &y) in pred.data().iter().zip(target.data()) {
        if y > T::zero() {
            total = total - y * clamp(f).ln();
        }
    }
    Ok(total / T::count(n))
}

/// Both losses share the same derivative in the prediction: `-y / (n f)`,
/// zero where the clamp is active.
fn prob_loss_backward<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, upstream: T) -> Result<Tensor<T>, TensorError> {
    let (n, _) = dims2("loss_backward", pred)?;
    pred.expect_same_shape("loss_backward", target)?;
    let scale = upstream / T::count(n);
    let floor = T::lit(PROB_CLAMP);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&f, &y)| if f > floor && y > T::zero() { -scale * y / f } else { T::zero() })
        .collect();
    Tensor::new(pred.shape(), data)
}

pub fn kl_div_loss_backward<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, upstream: T) -> Result<Tensor<T>, TensorError> {
    prob_loss_backward(pred, target, upstream)
}

pub fn cross_entropy_loss_backward<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    upstream: T,
) -> Result<Tensor<T>, TensorError> {
    prob_loss_backward(pred, target, upstream)
}

/// Mean row entropy `-(1/n) Σ y log y`.
pub fn entropy<T: Real>(p: &Tensor<T>) -> Result<T, TensorError> {
    let (n, _) = dims2("entropy", p)?;
    let s: T = p
        .data()
        .iter()
        .filter(|&&y| y > T::zero())
        .map(|&y| -y * y.ln())
        .sum();
    Ok(s / T::count(n))
}
