//! Dense row-major tensor storage.
//!
//! `Tensor` is plain storage: shape, contiguous data, and an optional
//! gradient buffer. All differentiable computation happens in
//! [`crate::graph`]; images, parameters and checkpoints use `Tensor`
//! directly.

use crate::error::Error;
use crate::num::Scalar;
use crate::Result;
use rand_distr::{Distribution, Normal};

/// Dense row-major tensor. Layout for images and feature maps is
/// `[channels, height, width]`; matrices are `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Whether gradients should flow to this tensor when it is bound to a
    /// graph as a parameter leaf.
    pub requires_grad: bool,
    /// Gradient of the most recent backward pass, same length as `data`.
    pub grad: Option<Vec<T>>,
}

/// Number of elements implied by a shape (empty shape = scalar = 1).
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Render a shape like `[3, 64, 64]` for error messages.
pub fn fmt_shape(shape: &[usize]) -> String {
    format!("{:?}", shape)
}

impl<T: Scalar> Tensor<T> {
    /// Build from existing data; errors if the length does not match.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor_new",
                format!("shape {} wants {} elements, got {}", fmt_shape(&shape), numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    /// All-zeros tensor.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![T::zero(); n], requires_grad: false, grad: None }
    }

    /// Constant-filled tensor.
    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![value; n], requires_grad: false, grad: None }
    }

    /// Zero-mean Gaussian init with the given standard deviation. Samples
    /// are drawn in `f64` and narrowed, so an `f32` and an `f64` tensor
    /// built from the same generator agree to `f32` precision.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl rand::Rng) -> Self {
        let n = numel(&shape);
        let dist = Normal::new(0.0f64, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| T::of_f64(dist.sample(rng))).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Consume into the raw data vector.
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterpret under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::shape(
                "tensor_reshape",
                format!("cannot view {} as {}", fmt_shape(&self.shape), fmt_shape(&shape)),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Mark as a trainable parameter (gradients will be collected).
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Drop any stored gradient.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Convert elementwise to another scalar type (via f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of_f64(x.to_f64_lossy())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}
