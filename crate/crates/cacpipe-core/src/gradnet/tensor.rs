//! Dense row-major tensors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::real::Real;

/// Row-major dense tensor. Batched activations use shape
/// [batch, channels, spatial...]: 4 dims for 2-D nets, 5 for 3-D nets.
#[derive(Clone, Debug)]
pub struct Tensor<R: Real> {
    /// Extent of each dimension, slowest-varying first.
    pub shape: Vec<usize>,
    /// Values, row-major.
    pub data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    /// Zero-filled tensor.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![R::ZERO; n],
        }
    }

    /// Tensor from parts, validating the element count.
    pub fn new(shape: &[usize], data: Vec<R>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(CoreError::invalid("tensor data length does not match shape"));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor has no elements.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Converts to an f64 tensor.
    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64()).collect(),
        }
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(CoreError::diverged("tensor contains non-finite values"))
        }
    }
}

impl Tensor<f64> {
    /// Converts to the given storage type.
    pub fn to_real<R: Real>(&self) -> Tensor<R> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| R::from_f64(v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_and_shape_check() {
        let t = Tensor::<f32>::zeros(&[2, 3, 4]);
        assert_eq!(t.len(), 24);
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        let t = Tensor::<f32>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.to_f64().data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn finite_check() {
        let mut t = Tensor::<f32>::zeros(&[2]);
        assert!(t.check_finite().is_ok());
        t.data[1] = f32::NAN;
        assert!(t.check_finite().is_err());
    }
}
