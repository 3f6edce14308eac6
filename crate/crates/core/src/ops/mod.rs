//! Forward and backward kernels for the fixed ACDNet operator set.
//!
//! Every kernel is a pure function over its inputs. Layouts are NCHW for
//! feature maps, `[F, C, kh, kw]` for convolution weights and `[out, in]`
//! for dense weights.

mod activation;
mod conv;
mod dense;
mod loss;
mod norm;
mod pool;
mod shape;

pub use activation::{relu, relu_backward, softmax, softmax_backward};
pub use conv::{conv2d, conv2d_backward, conv2d_output_dims, Conv2dConfig, Conv2dGrads};
pub use dense::{dense, dense_backward, DenseGrads};
pub use loss::{
    cross_entropy_loss, cross_entropy_loss_backward, entropy, kl_div_loss, kl_div_loss_backward,
    validate_probability_rows, PROB_CLAMP,
};
pub use norm::{
    batchnorm_infer, batchnorm_infer_backward, batchnorm_train, batchnorm_train_backward,
    BatchNormCache, BatchNormGrads, BN_EPS, BN_MOMENTUM,
};
pub use pool::{avgpool, avgpool_backward, maxpool, maxpool_backward, pool_output_dims};
pub use shape::{swap_channel_height, unflatten_dims};

use crate::tensor::{Tensor, TensorError};

pub(crate) fn dims4<T: crate::Real>(
    op: &'static str,
    t: &Tensor<T>,
) -> Result<(usize, usize, usize, usize), TensorError> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(TensorError::Rank {
            op,
            expected: 4,
            found: t.shape().to_vec(),
        }),
    }
}

pub(crate) fn dims2<T: crate::Real>(
    op: &'static str,
    t: &Tensor<T>,
) -> Result<(usize, usize), TensorError> {
    match *t.shape() {
        [n, m] => Ok((n, m)),
        _ => Err(TensorError::Rank {
            op,
            expected: 2,
            found: t.shape().to_vec(),
        }),
    }
}
