//! Dense row-major tensors and a recording reverse-mode graph.

mod gradcheck;
mod graph;
mod kernels;
pub mod morph;
mod ops;

pub use gradcheck::{grad_check, grad_check_refined, grad_check_tampered};
pub use graph::{Graph, GradStore, Var};
pub use kernels::{bilinear_resize_kernel, conv2d_kernel, cosine_similarity, sigmoid_kernel};

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major, immutable once constructed.
///
/// Clones share the underlying buffer.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "tensor_new",
                detail: format!("zero extent in dims {dims:?}"),
            });
        }
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor_new",
                detail: format!("dims {dims:?} need {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: Arc::new(vec![T::zero(); n]),
        }
    }

    pub fn filled(dims: &[usize], value: T) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: Arc::new((0..n).map(|i| f(i)).collect()),
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(dims: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = dims.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                crate::scalar::s::<T>(z * std)
            })
            .collect();
        Tensor {
            dims: dims.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    /// Shares the buffer under a new shape of identical volume.
    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {dims:?}", self.dims),
            });
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute difference; shape mismatch counts as infinite.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        if self.dims != other.dims {
            return T::infinity();
        }
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    /// Exact buffer equality (bitwise for equal-width floats).
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a == b || (a.is_nan() && b.is_nan()))
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }
}
