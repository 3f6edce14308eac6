//! Dense row-major tensors.
//!
//! [`Tensor`] is generic over the element type so that the production path
//! can run in `f32` while gradient checks run the exact same kernels in `f64`.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

/// Floating point element type accepted by every kernel.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Converts a constant.
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable constant")
    }

    fn count(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("representable count")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch on {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("{op}: expected rank {expected}, found shape {found:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: Vec<usize>,
    },
    #[error("{op}: kernel {kernel} exceeds input extent {extent} on {axis}")]
    KernelTooLarge {
        op: &'static str,
        axis: &'static str,
        kernel: usize,
        extent: usize,
    },
    #[error("{op}: invalid argument: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} contains a zero dimension")]
    ZeroDim(Vec<usize>),
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape.to_vec()));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same data, new shape. The element count must agree.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, v| if v.abs() > acc { v.abs() } else { acc })
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) -> Result<(), TensorError> {
        self.expect_same_shape("axpy", other)?;
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn expect_same_shape(&self, op: &'static str, other: &Tensor<T>) -> Result<(), TensorError> {
        if self.shape != other.shape {
            let dim = self
                .shape
                .iter()
                .zip(&other.shape)
                .position(|(a, b)| a != b)
                .unwrap_or(self.shape.len().min(other.shape.len()));
            return Err(TensorError::ShapeMismatch {
                op,
                what: format!("axis {dim}"),
                expected: self.shape.get(dim).copied().unwrap_or(0),
                found: other.shape.get(dim).copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Keeps only the listed indices along `axis`, in the given order.
    pub fn select(&self, axis: usize, keep: &[usize]) -> Tensor<T> {
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let extent = self.shape[axis];
        let mut data = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            for &k in keep {
                let start = (o * extent + k) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = keep.len();
        Tensor { shape, data }
    }

    /// Removes index `index` along `axis`.
    pub fn remove_index(&self, axis: usize, index: usize) -> Tensor<T> {
        let keep: Vec<usize> = (0..self.shape[axis]).filter(|&i| i != index).collect();
        self.select(axis, &keep)
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ... ({} total)", self.data.len())?;
        }
        write!(f, "]")
    }
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let base = c * 8;
        let (ca, cb) = (&a[base..base + 8], &b[base..base + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(matches!(
            Tensor::<f32>::new(&[2, 3], vec![0.0; 5]),
            Err(TensorError::DataLength { .. })
        ));
        assert!(matches!(
            Tensor::<f32>::new(&[2, 0], vec![]),
            Err(TensorError::ZeroDim(_))
        ));
    }

    #[test]
    fn select_and_remove_along_axis() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 2], |i| i as f64);
        let r = t.remove_index(1, 1);
        assert_eq!(r.shape(), &[2, 2, 2]);
        assert_eq!(r.data(), &[0.0, 1.0, 4.0, 5.0, 6.0, 7.0, 10.0, 11.0]);
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..37).map(|i| 1.0 - i as f64 * 0.1).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }
}
