//! Central finite-difference gradient checking at 64-bit precision.
//!
//! These helpers only ever call a forward closure, so they stay independent
//! of every backward implementation they are used to verify.

use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Absolute floor of the relative-error denominator; gradients smaller than
/// this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` at a single element of `point`.
pub fn numeric_partial(point: &Tensor<f64>, index: usize, mut f: impl FnMut(&Tensor<f64>) -> f64) -> f64 {
    let mut probe = point.clone();
    let orig = probe.data()[index];
    probe.data_mut()[index] = orig + FD_STEP;
    let plus = f(&probe);
    probe.data_mut()[index] = orig - FD_STEP;
    let minus = f(&probe);
    (plus - minus) / (2.0 * FD_STEP)
}

/// Full numeric gradient of `f` with respect to every element of `point`.
pub fn numeric_grad(point: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut out = Tensor::zeros(point.shape());
    for i in 0..point.len() {
        out.data_mut()[i] = numeric_partial(point, i, &mut f);
    }
    out
}

/// Largest element-wise relative error between two gradients.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

pub fn assert_grad_close(analytic: &Tensor<f64>, numeric: &Tensor<f64>, tol: f64) {
    let err = max_relative_error(analytic, numeric);
    assert!(
        err < tol,
        "max relative error {err:e} >= {tol:e}\nanalytic: {analytic:?}\nnumeric:  {numeric:?}"
    );
}

mod suite;

pub use suite::{network_check, operator_suite, NetworkCheck};
