use crate::ops::dims4;
use crate::tensor::{axpy, dot, Real, Tensor, TensorError};

/// Stride and zero padding of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dConfig {
    pub fn valid(stride: (usize, usize)) -> Self {
        Self {
            stride,
            padding: (0, 0),
        }
    }
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Self::valid((1, 1))
    }
}

/// Output extent `floor((in + 2p - k) / s) + 1` per axis.
pub fn conv2d_output_dims(
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    cfg: Conv2dConfig,
) -> Result<(usize, usize), TensorError> {
    let (sh, sw) = cfg.stride;
    if sh == 0 || sw == 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            reason: format!("stride {:?} must be positive", cfg.stride),
        });
    }
    let ph = h + 2 * cfg.padding.0;
    let pw = w + 2 * cfg.padding.1;
    if kh > ph {
        return Err(TensorError::KernelTooLarge {
            op: "conv2d",
            axis: "height",
            kernel: kh,
            extent: ph,
        });
    }
    if kw > pw {
        return Err(TensorError::KernelTooLarge {
            op: "conv2d",
            axis: "width",
            kernel: kw,
            extent: pw,
        });
    }
    Ok(((ph - kh) / sh + 1, (pw - kw) / sw + 1))
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cfg: Conv2dConfig,
}

impl Geometry {
    fn check<T: Real>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        cfg: Conv2dConfig,
    ) -> Result<Self, TensorError> {
        let (n, c, h, w) = dims4("conv2d", input)?;
        let (f, wc, kh, kw) = dims4("conv2d", weight)?;
        if wc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                what: "input channels".into(),
                expected: wc,
                found: c,
            });
        }
        let (oh, ow) = conv2d_output_dims((h, w), (kh, kw), cfg)?;
        Ok(Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            oh,
            ow,
            cfg,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Unrolls one sample into `[positions, patch]`; padded taps stay zero.
    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let patch = self.patch();
        let (sh, sw) = self.cfg.stride;
        let (ph, pw) = self.cfg.padding;
        col.fill(T::zero());
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut col[(oy * self.ow + ox) * patch..][..patch];
                for ci in 0..self.c {
                    for ki in 0..self.kh {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        let dst = &mut row[(ci * self.kh + ki) * self.kw..][..self.kw];
                        for (kj, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a `[positions, patch]` gradient back into one sample.
    fn col2im<T: Real>(&self, col: &[T], gx: &mut [T]) {
        let patch = self.patch();
        let (sh, sw) = self.cfg.stride;
        let (ph, pw) = self.cfg.padding;
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &col[(oy * self.ow + ox) * patch..][..patch];
                for ci in 0..self.c {
                    for ki in 0..self.kh {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut gx[(ci * self.h + iy as usize) * self.w..][..self.w];
                        let src = &row[(ci * self.kh + ki) * self.kw..][..self.kw];
                        for (kj, &s) in src.iter().enumerate() {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] = dst[ix as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) with optional zero padding.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    cfg: Conv2dConfig,
) -> Result<Tensor<T>, TensorError> {
    let g = Geometry::check(input, weight, cfg)?;
    if bias.shape() != [g.f] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            what: "bias length".into(),
            expected: g.f,
            found: bias.len(),
        });
    }
    let patch = g.patch();
    let positions = g.positions();
    let in_sample = g.c * g.h * g.w;
    let out_sample = g.f * positions;
    let mut out = vec![T::zero(); g.n * out_sample];
    let mut col = vec![T::zero(); positions * patch];
    let wdata = weight.data();
    for ni in 0..g.n {
        g.im2col(&input.data()[ni * in_sample..][..in_sample], &mut col);
        let o = &mut out[ni * out_sample..][..out_sample];
        for fi in 0..g.f {
            let wf = &wdata[fi * patch..][..patch];
            let b = bias.data()[fi];
            let orow = &mut o[fi * positions..][..positions];
            for (p, ov) in orow.iter_mut().enumerate() {
                *ov = b + dot(wf, &col[p * patch..][..patch]);
            }
        }
    }
    Tensor::new(&[g.n, g.f, g.oh, g.ow], out)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T: Real> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    cfg: Conv2dConfig,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>, TensorError> {
    let g = Geometry::check(input, weight, cfg)?;
    let expected = [g.n, g.f, g.oh, g.ow];
    if grad_out.shape() != expected {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            what: "upstream gradient length".into(),
            expected: expected.iter().product(),
            found: grad_out.len(),
        });
    }
    let patch = g.patch();
    let positions = g.positions();
    let in_sample = g.c * g.h * g.w;
    let out_sample = g.f * positions;
    let wdata = weight.data();
    let mut gw = vec![T::zero(); g.f * patch];
    let mut gb = vec![T::zero(); g.f];
    let mut gx = vec![T::zero(); g.n * in_sample];
    let mut col = vec![T::zero(); positions * patch];
    let mut gcol = vec![T::zero(); positions * patch];
    for ni in 0..g.n {
        g.im2col(&input.data()[ni * in_sample..][..in_sample], &mut col);
        gcol.fill(T::zero());
        let go = &grad_out.data()[ni * out_sample..][..out_sample];
        for fi in 0..g.f {
            let grow = &go[fi * positions..][..positions];
            let wf = &wdata[fi * patch..][..patch];
            let gwf = &mut gw[fi * patch..][..patch];
            let mut bsum = T::zero();
            for (p, &gv) in grow.iter().enumerate() {
                if gv == T::zero() {
                    continue;
                }
                bsum = bsum + gv;
                axpy(gv, &col[p * patch..][..patch], gwf);
                axpy(gv, wf, &mut gcol[p * patch..][..patch]);
            }
            gb[fi] = gb[fi] + bsum;
        }
        g.col2im(&gcol, &mut gx[ni * in_sample..][..in_sample]);
    }
    Ok(Conv2dGrads {
        input: Tensor::new(input.shape(), gx)?,
        weight: Tensor::new(weight.shape(), gw)?,
        bias: Tensor::new(&[g.f], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grad_close, numeric_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Six nested loops straight from the definition.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, cfg: Conv2dConfig) -> Vec<f64> {
        let [n, c, h, wd] = x.shape().try_into().unwrap();
        let [f, _, kh, kw] = w.shape().try_into().unwrap();
        let (oh, ow) = conv2d_output_dims((h, wd), (kh, kw), cfg).unwrap();
        let mut out = vec![0.0; n * f * oh * ow];
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[fi];
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * cfg.stride.0 + ki) as isize - cfg.padding.0 as isize;
                                    let ix = (ox * cfg.stride.1 + kj) as isize - cfg.padding.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((fi * c + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn sfeb_conv1_output_width() {
        let dims = conv2d_output_dims((1, 30225), (1, 9), Conv2dConfig::valid((1, 2))).unwrap();
        assert_eq!(dims, (1, 15109));
    }

    #[test]
    fn all_ones_strided() {
        let x = Tensor::<f64>::ones(&[1, 1, 1, 10]);
        let w = Tensor::ones(&[1, 1, 1, 3]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, Conv2dConfig::valid((1, 2))).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 4]);
        assert_eq!(y.data(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[1, 2, 4, 4], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let cfg = Conv2dConfig::default();
        let y = conv2d(&x, &w, &b, cfg).unwrap();
        for (a, e) in y.data().iter().zip(naive_conv(&x, &w, &b, cfg)) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn naive_oracle_sweep_over_seeds_and_shapes() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=2);
            let c = rng.random_range(1..=3);
            let h = rng.random_range(3..=8);
            let w = rng.random_range(3..=8);
            let kh = rng.random_range(1..=3);
            let kw = rng.random_range(1..=3);
            let cfg = Conv2dConfig {
                stride: (rng.random_range(1..=2), rng.random_range(1..=2)),
                padding: (rng.random_range(0..=1), rng.random_range(0..=1)),
            };
            let x = random(&[n, c, h, w], &mut rng);
            let wt = random(&[2, c, kh, kw], &mut rng);
            let b = random(&[2], &mut rng);
            let y = conv2d(&x, &wt, &b, cfg).unwrap();
            for (a, e) in y.data().iter().zip(naive_conv(&x, &wt, &b, cfg)) {
                assert!((a - e).abs() < 1e-9, "seed {seed}");
            }
        }
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[3, 1, 3, 3]);
        let b = Tensor::zeros(&[3]);
        let err = conv2d(&x, &w, &b, Conv2dConfig::default()).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn kernel_larger_than_input() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 4]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(
            conv2d(&x, &w, &b, Conv2dConfig::default()),
            Err(TensorError::KernelTooLarge { axis: "height", .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = Conv2dConfig {
            stride: (1, 2),
            padding: (1, 0),
        };
        let x = random(&[2, 2, 3, 7], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let y = conv2d(&x, &w, &b, cfg).unwrap();
        let upstream = random(y.shape(), &mut rng);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            let y = conv2d(x, w, b, cfg).unwrap();
            y.data().iter().zip(upstream.data()).map(|(a, g)| a * g).sum::<f64>()
        };
        let grads = conv2d_backward(&x, &w, cfg, &upstream).unwrap();
        assert_grad_close(&grads.input, &numeric_grad(&x, |t| loss(t, &w, &b)), 1e-4);
        assert_grad_close(&grads.weight, &numeric_grad(&w, |t| loss(&x, t, &b)), 1e-4);
        assert_grad_close(&grads.bias, &numeric_grad(&b, |t| loss(&x, &w, t)), 1e-4);
    }
}
