use crate::ops::dims2;
use crate::tensor::{axpy, dot, Real, Tensor, TensorError};

fn check<T: Real>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize), TensorError> {
    let (n, din) = dims2("dense", x)?;
    let (dout, wdin) = dims2("dense", weight)?;
    if wdin != din {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            what: "input features".into(),
            expected: wdin,
            found: din,
        });
    }
    Ok((n, din, dout))
}

/// `y = x Wᵀ + b` for `x: [N, in]`, `W: [out, in]`.
pub fn dense<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (n, din, dout) = check(x, weight)?;
    if bias.shape() != [dout] {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            what: "bias length".into(),
            expected: dout,
            found: bias.len(),
        });
    }
    let mut out = Vec::with_capacity(n * dout);
    for xr in x.data().chunks(din) {
        for (o, wr) in weight.data().chunks(din).enumerate() {
            out.push(bias.data()[o] + dot(wr, xr));
        }
    }
    Tensor::new(&[n, dout], out)
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T: Real> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>, TensorError> {
    let (n, din, dout) = check(x, weight)?;
    if grad_out.shape() != [n, dout] {
        return Err(TensorError::ShapeMismatch {
            op: "dense_backward",
            what: "upstream gradient length".into(),
            expected: n * dout,
            found: grad_out.len(),
        });
    }
    let mut gx = vec![T::zero(); n * din];
    let mut gw = vec![T::zero(); dout * din];
    let mut gb = vec![T::zero(); dout];
    for ni in 0..n {
        let xr = &x.data()[ni * din..][..din];
        for o in 0..dout {
            let g = grad_out.data()[ni * dout + o];
            gb[o] = gb[o] + g;
            axpy(g, xr, &mut gw[o * din..][..din]);
            axpy(g, &weight.data()[o * din..][..din], &mut gx[ni * din..][..din]);
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(x.shape(), gx)?,
        weight: Tensor::new(weight.shape(), gw)?,
        bias: Tensor::new(&[dout], gb)?,
    })
}
