//! SGD with Nesterov momentum and L2 weight decay.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
    #[error("parameter `{name}` shape {param:?} differs from its {what} shape {other:?}")]
    Shape {
        name: String,
        what: &'static str,
        param: Vec<usize>,
        other: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T: Real> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self, OptimError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(OptimError::Hyper(format!("lr {lr} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(OptimError::Hyper(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0) {
            return Err(OptimError::Hyper(format!("weight decay {weight_decay} is negative")));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }

    /// Drops the velocity of parameters whose shape changed or that vanished.
    pub fn retain_matching<'a>(&mut self, params: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) {
        let shapes: BTreeMap<&str, &[usize]> = params.into_iter().map(|(n, t)| (n, t.shape())).collect();
        self.velocity.retain(|n, v| shapes.get(n.as_str()) == Some(&v.shape()));
    }
}

/// One Nesterov step on a single named parameter:
/// `g' = g + wd·θ; v = μ·v + g'; θ -= lr·(g' + μ·v)`.
pub fn sgd_nesterov_step<T: Real>(
    name: &str,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut OptimizerState<T>,
) -> Result<(), OptimError> {
    if param.shape() != grad.shape() {
        return Err(OptimError::Shape {
            name: name.to_string(),
            what: "gradient",
            param: param.shape().to_vec(),
            other: grad.shape().to_vec(),
        });
    }
    let lr = T::lit(state.lr);
    let mu = T::lit(state.momentum);
    let wd = T::lit(state.weight_decay);
    let v = state
        .velocity
        .entry(name.to_string())
        .or_insert_with(|| Tensor::zeros(param.shape()));
    if v.shape() != param.shape() {
        return Err(OptimError::Shape {
            name: name.to_string(),
            what: "velocity",
            param: param.shape().to_vec(),
            other: v.shape().to_vec(),
        });
    }
    for ((p, &g), vel) in param.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
        let g = g + wd * *p;
        *vel = mu * *vel + g;
        *p = *p - lr * (g + mu * *vel);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_without_momentum_or_decay() {
        let mut st = OptimizerState::<f64>::new(0.1, 0.0, 0.0).unwrap();
        let mut p = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::new(&[2], vec![0.5, 1.0]).unwrap();
        sgd_nesterov_step("p", &mut p, &g, &mut st).unwrap();
        assert_eq!(p.data(), &[0.95, -2.1]);
    }

    #[test]
    fn two_nesterov_steps_match_unrolled_recurrence() {
        let (lr, mu, g0) = (0.1, 0.9, 0.5);
        let mut st = OptimizerState::<f64>::new(lr, mu, 0.0).unwrap();
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(g0);
        sgd_nesterov_step("p", &mut p, &g, &mut st).unwrap();
        sgd_nesterov_step("p", &mut p, &g, &mut st).unwrap();
        // v1 = g, step1 = g + μg; v2 = μg + g, step2 = g + μ(μg + g)
        let expected = 1.0 - lr * (g0 + mu * g0) - lr * (g0 + mu * (mu * g0 + g0));
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((st.velocity("p").unwrap().data()[0] - 1.9 * g0).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let (lr, wd) = (0.1, 5e-4);
        let mut st = OptimizerState::<f64>::new(lr, 0.0, wd).unwrap();
        let mut p = Tensor::scalar(2.0);
        let zero = Tensor::scalar(0.0);
        for k in 1..=3 {
            sgd_nesterov_step("p", &mut p, &zero, &mut st).unwrap();
            assert!((p.data()[0] - 2.0 * (1.0 - lr * wd).powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_hyperparameters_and_shapes() {
        assert!(OptimizerState::<f32>::new(0.0, 0.9, 0.0).is_err());
        assert!(OptimizerState::<f32>::new(0.1, 1.0, 0.0).is_err());
        let mut st = OptimizerState::<f32>::new(0.1, 0.9, 0.0).unwrap();
        let mut p = Tensor::zeros(&[2]);
        assert!(sgd_nesterov_step("p", &mut p, &Tensor::zeros(&[3]), &mut st).is_err());
    }
}
