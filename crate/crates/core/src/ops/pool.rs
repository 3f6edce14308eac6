//! Non-overlapping pooling: stride always equals the kernel and trailing
//! rows/columns that do not fill a window are dropped.

use crate::ops::dims4;
use crate::tensor::{Real, Tensor, TensorError};

pub fn pool_output_dims(
    op: &'static str,
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
) -> Result<(usize, usize), TensorError> {
    if kh == 0 || kw == 0 {
        return Err(TensorError::Invalid {
            op,
            reason: format!("kernel ({kh},{kw}) must be positive"),
        });
    }
    if kh > h {
        return Err(TensorError::KernelTooLarge {
            op,
            axis: "height",
            kernel: kh,
            extent: h,
        });
    }
    if kw > w {
        return Err(TensorError::KernelTooLarge {
            op,
            axis: "width",
            kernel: kw,
            extent: w,
        });
    }
    Ok((h / kh, w / kw))
}

/// Max pooling. Returns the output and, per output element, the flat input
/// index of the first maximum in its window.
pub fn maxpool<T: Real>(
    x: &Tensor<T>,
    kernel: (usize, usize),
) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    let (n, c, h, w) = dims4("maxpool", x)?;
    let (oh, ow) = pool_output_dims("maxpool", (h, w), kernel)?;
    let (kh, kw) = kernel;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * kh * w + ox * kw;
                for ki in 0..kh {
                    let row = base + (oy * kh + ki) * w + ox * kw;
                    for idx in row..row + kw {
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, arg))
}

pub fn maxpool_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    if argmax.len() != grad_out.len() {
        return Err(TensorError::ShapeMismatch {
            op: "maxpool_backward",
            what: "upstream gradient length".into(),
            expected: argmax.len(),
            found: grad_out.len(),
        });
    }
    let mut gx = Tensor::zeros(input_shape);
    let gd = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gd[idx] = gd[idx] + g;
    }
    Ok(gx)
}

pub fn avgpool<T: Real>(x: &Tensor<T>, kernel: (usize, usize)) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = dims4("avgpool", x)?;
    let (oh, ow) = pool_output_dims("avgpool", (h, w), kernel)?;
    let (kh, kw) = kernel;
    let denom = T::count(kh * kw);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for ki in 0..kh {
                    let row = base + (oy * kh + ki) * w + ox * kw;
                    s = s + xd[row..row + kw].iter().copied().sum::<T>();
                }
                out.push(s / denom);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn avgpool_backward<T: Real>(
    input_shape: &[usize],
    kernel: (usize, usize),
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let [n, c, h, w]: [usize; 4] = input_shape.try_into().map_err(|_| TensorError::Rank {
        op: "avgpool_backward",
        expected: 4,
        found: input_shape.to_vec(),
    })?;
    let (oh, ow) = pool_output_dims("avgpool_backward", (h, w), kernel)?;
    if grad_out.len() != n * c * oh * ow {
        return Err(TensorError::ShapeMismatch {
            op: "avgpool_backward",
            what: "upstream gradient length".into(),
            expected: n * c * oh * ow,
            found: grad_out.len(),
        });
    }
    let (kh, kw) = kernel;
    let denom = T::count(kh * kw);
    let mut gx = Tensor::zeros(input_shape);
    let gd = gx.data_mut();
    let go = grad_out.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = go[(plane * oh + oy) * ow + ox] / denom;
                for ki in 0..kh {
                    let row = base + (oy * kh + ki) * w + ox * kw;
                    for v in &mut gd[row..row + kw] {
                        *v = *v + g;
                    }
                }
            }
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grad_close, numeric_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sfeb_maxpool_width() {
        assert_eq!(pool_output_dims("maxpool", (1, 7553), (1, 50)).unwrap(), (1, 151));
    }

    #[test]
    fn avgpool_collapses_to_mean() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let y = avgpool(&x, (1, 4)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn floor_discards_remainder() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 5, 7], |i| i as f32);
        let (y, _) = maxpool(&x, (2, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 3]);
    }

    #[test]
    fn kernel_exceeding_extent_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 3]);
        assert!(matches!(
            maxpool(&x, (1, 4)),
            Err(TensorError::KernelTooLarge { axis: "width", .. })
        ));
    }

    #[test]
    fn ties_route_to_first_maximum() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 4], vec![1.0, 5.0, 5.0, 0.0]).unwrap();
        let (_, arg) = maxpool(&x, (1, 4)).unwrap();
        let g = maxpool_backward(x.shape(), &arg, &Tensor::<f64>::ones(&[1, 1, 1, 1])).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // distinct values spaced well apart so no finite-difference probe crosses a tie
        let mut vals: Vec<f64> = (0..2 * 3 * 4 * 6).map(|i| i as f64 * 0.1).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        let x = Tensor::new(&[2, 3, 4, 6], vals).unwrap();
        let up = Tensor::from_fn(&[2, 3, 2, 3], |_| rng.random_range(-1.0..1.0));
        let (_, arg) = maxpool(&x, (2, 2)).unwrap();
        let analytic = maxpool_backward(x.shape(), &arg, &up).unwrap();
        let numeric = numeric_grad(&x, |t| {
            let (y, _) = maxpool(t, (2, 2)).unwrap();
            y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        });
        assert_grad_close(&analytic, &numeric, 1e-4);

        let up = Tensor::from_fn(&[2, 3, 1, 2], |_| rng.random_range(-1.0..1.0));
        let analytic = avgpool_backward(x.shape(), (3, 3), &up).unwrap();
        let numeric = numeric_grad(&x, |t| {
            let y = avgpool(t, (3, 3)).unwrap();
            y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        });
        assert_grad_close(&analytic, &numeric, 1e-4);
    }
}
