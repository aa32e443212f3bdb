//! Dense row-major tensors over `f32` or `f64`.
//!
//! Training paths run in `f32`; the gradient/oracle suites run the same code
//! in `f64`. The `Real` trait is the small surface both share.

use crate::error::{Error, Result};
use std::fmt::{Debug, Display};

/// Scalar type for all numeric kernels.
///
/// The `fast_*` hooks let a scalar type substitute wider hardware paths for
/// the portable inner loops; they return `false`/`None` when unavailable so
/// callers fall back. Hardware and portable paths may round differently
/// (fused multiply-add), but each machine picks exactly one path for the
/// whole process, which keeps every same-run equivalence contract intact.
pub trait Real:
    num_traits::Float + Debug + Display + Default + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// out[j] += s * b[j]
    #[inline]
    fn fast_axpy(_s: Self, _b: &[Self], _out: &mut [Self]) -> bool {
        false
    }

    /// Four stacked axpy updates sharing one loaded b row.
    #[inline]
    fn fast_axpy4(_s: [Self; 4], _b: &[Self], _out: [&mut [Self]; 4]) -> bool {
        false
    }

    /// Lane-ordered dot product (see `kernels::dot` for the pinned order).
    #[inline]
    fn fast_dot(_a: &[Self], _b: &[Self]) -> Option<Self> {
        None
    }

    /// Four dot products of one a row against consecutive b rows.
    #[inline]
    fn fast_dot4(_a: &[Self], _b: [&[Self]; 4]) -> Option<[Self; 4]> {
        None
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn fast_axpy(s: Self, b: &[Self], out: &mut [Self]) -> bool {
        #[cfg(target_arch = "x86_64")]
        if crate::simd::have_avx2_fma() {
            unsafe { crate::simd::axpy_f32(s, b, out) };
            return true;
        }
        false
    }

    #[inline]
    fn fast_axpy4(s: [Self; 4], b: &[Self], out: [&mut [Self]; 4]) -> bool {
        #[cfg(target_arch = "x86_64")]
        if crate::simd::have_avx2_fma() {
            unsafe { crate::simd::axpy4_f32(s, b, out) };
            return true;
        }
        false
    }

    #[inline]
    fn fast_dot(a: &[Self], b: &[Self]) -> Option<Self> {
        #[cfg(target_arch = "x86_64")]
        if crate::simd::have_avx2_fma() {
            return Some(unsafe { crate::simd::dot_f32(a, b) });
        }
        None
    }

    #[inline]
    fn fast_dot4(a: &[Self], b: [&[Self]; 4]) -> Option<[Self; 4]> {
        #[cfg(target_arch = "x86_64")]
        if crate::simd::have_avx2_fma() {
            return Some(unsafe { crate::simd::dot4_f32(a, b) });
        }
        None
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense tensor. The last axis is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel] }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        let shape = vec![data.len()];
        Tensor { shape, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Scalar tensors have an empty shape or a single element per axis.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<T> {
        if !self.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "item",
                detail: format!("expected scalar, got shape {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Largest absolute elementwise difference, in f64.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Frobenius norm (sqrt of the sum of squared entries), in f64.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast elementwise into another scalar type.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}
