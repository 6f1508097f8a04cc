//! Dense tensors, a sequential layer graph with reverse-mode gradients, and Adam.
//!
//! Everything here is generic over [`Scalar`] so the same kernels run in
//! `f32` for training and in `f64` for the finite-difference gradient oracle.

mod adam;
mod gemm;
mod gradcheck;
mod layers;
mod loss;
mod network;

pub use adam::{Adam, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, ParamCheck};
pub use layers::{
    AvgPool, BatchNorm, Dense, Dropout, Layer, LayerCache, PointwiseConv, SpatialConv, TemporalConv, LOG_CLAMP,
};
pub use loss::{softmax, softmax_cross_entropy};
pub use network::{ForwardMode, Network, Tape};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use thiserror::Error;

/// Floating-point element type usable by the kernels.
pub trait Scalar: Float + Sum + Default + Debug + AddAssign + SubAssign + MulAssign + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// Raw GEMM entry point; see [`matrixmultiply::sgemm`].
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch at layer {index} ({layer}): expected {expected}, got {got:?}")]
    ShapeMismatch {
        index: usize,
        layer: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("non-finite activation produced by layer {index} ({layer})")]
    NonFinite { index: usize, layer: &'static str },
    #[error("backward requires a tape recorded in train mode, got {0:?}")]
    TapeMode(ForwardMode),
    #[error("tape has {tape} entries but the network has {layers} layers")]
    TapeLength { tape: usize, layers: usize },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("optimizer has no state for trainable parameter {index}")]
    MissingState { index: usize },
    #[error("optimizer state for parameter {index} has shape {state:?}, parameter has {param:?}")]
    StateShape {
        index: usize,
        state: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
}

/// Row-major dense tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, KernelError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(KernelError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, KernelError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(KernelError::DataLength {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self, KernelError> {
        let Some(first) = items.first() else {
            return Err(KernelError::EmptyBatch);
        };
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape != first.shape {
                return Err(KernelError::DataLength {
                    shape: first.shape.clone(),
                    len: t.len(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape, data })
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
            trainable: self.trainable,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn stack_prepends_axis() {
        let a = Tensor::<f32>::full(&[2, 2], 1.0);
        let b = Tensor::<f32>::full(&[2, 2], 2.0);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(&s.data()[4..], &[2.0; 4]);
    }
}
