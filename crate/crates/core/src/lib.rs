//! Construction, training, compression and int8 export of ACDNet-family
//! raw-audio classifiers.

pub mod compress;
pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod model;
pub mod net;
pub mod ops;
pub mod optim;
pub mod quant;
pub mod tensor;
pub mod train;

pub use tensor::{Real, Tensor, TensorError};
