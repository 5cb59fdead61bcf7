//! Dense tensors with a define-by-run reverse-mode tape.
//!
//! Values are stored row-major in a generic [`Real`] (normally `f32`). Every
//! reduction inside a kernel accumulates in `f64`, so an `f64` instantiation of
//! the same code path serves as a high-precision re-evaluation for gradient
//! checks.

mod conv;
mod ops;
pub mod optim;
mod tape;

pub use conv::{conv3d_reference, conv3d_reference_backward, Conv3dGeometry};
pub use optim::{OptimizerKind, OptimizerState};
pub use tape::{Tape, Var};

use std::fmt::Debug;
use std::iter::Sum;

use crate::error::{Error, Result};

/// Scalar storage type for tensors.
pub trait Real:
    num_traits::Float + Default + Debug + Send + Sync + Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.values.len() {
                return Err(Error::Shape(format!(
                    "gradient of length {} for tensor of {} values",
                    g.len(),
                    self.values.len()
                )));
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub(crate) fn accumulate_grad(&mut self, contribution: &[T]) {
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(contribution).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(contribution.to_vec()),
        }
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.values.clone())
    }

    /// Converts the stored values (and gradient, if any) to another scalar type.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::Shape("shape must have at least one axis".into()));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(Error::Shape(format!(
            "shape {shape:?} has a zero-sized axis {axis}"
        )));
    }
    Ok(())
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_axes_and_length_mismatch() {
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new(Vec::<usize>::new(), vec![]).is_err());
    }

    #[test]
    fn grad_slot_must_match_length() {
        let mut t = Tensor::<f32>::zeros(vec![3]).unwrap();
        assert!(t.set_grad(Some(vec![0.0; 2])).is_err());
        t.set_grad(Some(vec![1.0; 3])).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }

    #[test]
    fn cast_round_trips_exactly_through_f64() {
        let t = Tensor::<f32>::new(vec![2], vec![0.1, -3.5]).unwrap();
        assert_eq!(t.cast::<f64>().cast::<f32>(), t);
    }
}
