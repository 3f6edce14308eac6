use crate::ops::dims4;
use crate::tensor::{Real, Tensor, TensorError};

/// `[N, C, H, W] -> [N, H, C, W]`. The operation is its own inverse, so the
/// backward pass applies it to the upstream gradient.
pub fn swap_channel_height<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = dims4("swapaxes", x)?;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                let src = ((ni * c + ci) * h + hi) * w;
                let dst = ((ni * h + hi) * c + ci) * w;
                out[dst..dst + w].copy_from_slice(&xd[src..src + w]);
            }
        }
    }
    Tensor::new(&[n, h, c, w], out)
}

/// Shape of a `[N, C, H, W]` tensor flattened to `[N, C·H·W]`.
pub fn unflatten_dims(shape: &[usize]) -> Result<[usize; 2], TensorError> {
    match *shape {
        [n, ref rest @ ..] if !rest.is_empty() => Ok([n, rest.iter().product()]),
        _ => Err(TensorError::Rank {
            op: "flatten",
            expected: 4,
            found: shape.to_vec(),
        }),
    }
}
