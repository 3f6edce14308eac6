use crate::ops::dims4;
use crate::tensor::{Real, Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Values saved by the training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Real> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    /// Elements per channel (N·H·W).
    pub count: usize,
}

impl<T: Real> BatchNormCache<T> {
    /// Exponential running-statistics update; the running variance uses
    /// the unbiased batch estimate.
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T]) {
        let m = T::lit(BN_MOMENTUM);
        let unbias = if self.count > 1 {
            T::count(self.count) / T::count(self.count - 1)
        } else {
            T::one()
        };
        for c in 0..self.mean.len() {
            running_mean[c] = (T::one() - m) * running_mean[c] + m * self.mean[c];
            running_var[c] = (T::one() - m) * running_var[c] + m * self.var[c] * unbias;
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T: Real> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn check_affine<T: Real>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(), TensorError> {
    for (what, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm",
                what: format!("{what} channels"),
                expected: c,
                found: t.len(),
            });
        }
    }
    Ok(())
}

/// Per-channel normalization with batch statistics.
pub fn batchnorm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>), TensorError> {
    let (n, c, h, w) = dims4("batchnorm", x)?;
    check_affine(c, gamma, beta)?;
    let plane = h * w;
    let count = n * plane;
    let cnt = T::count(count);
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for ni in 0..n {
            s = s + xd[(ni * c + ci) * plane..][..plane].iter().copied().sum::<T>();
        }
        let mu = s / cnt;
        let mut v = T::zero();
        for ni in 0..n {
            for &val in &xd[(ni * c + ci) * plane..][..plane] {
                v = v + (val - mu) * (val - mu);
            }
        }
        mean[ci] = mu;
        var[ci] = v / cnt;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            for i in base..base + plane {
                let xh = (xd[i] - mean[ci]) * inv_std[ci];
                x_hat[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    let cache = BatchNormCache {
        x_hat: Tensor::new(x.shape(), x_hat)?,
        inv_std,
        mean,
        var,
        count,
    };
    Ok((Tensor::new(x.shape(), out)?, cache))
}

pub fn batchnorm_train_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>, TensorError> {
    cache.x_hat.expect_same_shape("batchnorm_backward", grad_out)?;
    let (n, c, h, w) = dims4("batchnorm_backward", grad_out)?;
    let plane = h * w;
    let m = T::count(cache.count);
    let (g, xh) = (grad_out.data(), cache.x_hat.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                dbeta[ci] = dbeta[ci] + g[i];
                dgamma[ci] = dgamma[ci] + g[i] * xh[i];
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let k = gamma.data()[ci] * cache.inv_std[ci] / m;
            for i in base..base + plane {
                dx[i] = k * (m * g[i] - dbeta[ci] - xh[i] * dgamma[ci]);
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(grad_out.shape(), dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}

/// Per-channel affine normalization with fixed running statistics.
pub fn batchnorm_infer<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = dims4("batchnorm", x)?;
    check_affine(c, gamma, beta)?;
    check_affine(c, running_mean, running_var)?;
    let plane = h * w;
    let mut out = x.data().to_vec();
    for ni in 0..n {
        for ci in 0..c {
            let scale = gamma.data()[ci] / (running_var.data()[ci] + eps).sqrt();
            let shift = beta.data()[ci] - running_mean.data()[ci] * scale;
            for v in &mut out[(ni * c + ci) * plane..][..plane] {
                *v = *v * scale + shift;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn batchnorm_infer_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>, TensorError> {
    x.expect_same_shape("batchnorm_backward", grad_out)?;
    let (n, c, h, w) = dims4("batchnorm_backward", x)?;
    let plane = h * w;
    let (xd, g) = (x.data(), grad_out.data());
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let inv_std = T::one() / (running_var.data()[ci] + eps).sqrt();
            let scale = gamma.data()[ci] * inv_std;
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                dx[i] = g[i] * scale;
                dbeta[ci] = dbeta[ci] + g[i];
                dgamma[ci] = dgamma[ci] + g[i] * (xd[i] - running_mean.data()[ci]) * inv_std;
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(x.shape(), dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}
