use crate::ops::dims2;
use crate::tensor::{Real, Tensor, TensorError};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    x.expect_same_shape("relu_backward", grad_out)?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Row-wise softmax over `[N, m]` with max subtraction.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (n, m) = dims2("softmax", x)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(m).take(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Backward of softmax given its output `y`: `y * (g - <g, y>)` per row.
pub fn softmax_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (_, m) = dims2("softmax_backward", y)?;
    y.expect_same_shape("softmax_backward", grad_out)?;
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), or) in y
        .data()
        .chunks(m)
        .zip(grad_out.data().chunks(m))
        .zip(out.chunks_mut(m))
    {
        let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - inner);
        }
    }
    Tensor::new(y.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grad_close, numeric_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f32>::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_over_fifty() {
        let x = Tensor::<f64>::full(&[2, 50], 3.7);
        let y = softmax(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.02).abs() < 1e-12));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let x = Tensor::<f32>::new(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let y = softmax(&x).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!(y.data()[1] < 1e-30);
    }

    #[test]
    fn softmax_rows_sum_to_one_for_large_magnitudes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::from_fn(&[16, 50], |_| rng.random_range(-1e4..1e4));
        let y = softmax(&x).unwrap();
        for row in y.data().chunks(50) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::from_fn(&[3, 5], |_| rng.random_range(-2.0..2.0));
        let up = Tensor::<f64>::from_fn(&[3, 5], |_| rng.random_range(-1.0..1.0));
        let y = softmax(&x).unwrap();
        let analytic = softmax_backward(&y, &up).unwrap();
        let numeric = numeric_grad(&x, |t| {
            softmax(t).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        });
        assert_grad_close(&analytic, &numeric, 1e-4);

        // keep probes away from the kink at zero
        let x = x.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        let analytic = relu_backward(&x, &up).unwrap();
        let numeric = numeric_grad(&x, |t| relu(t).data().iter().zip(up.data()).map(|(a, b)| a * b).sum());
        assert_grad_close(&analytic, &numeric, 1e-4);
    }
}
