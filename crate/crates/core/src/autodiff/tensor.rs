use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type of the engine. Training runs in `f32`;
/// gradient checks rerun the same kernels in `f64`.
pub trait Scalar:
    Float + Default + Debug + Display + Sum + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major array. Values are immutable once built; gradients live on
/// the [`Tape`](super::Tape).
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, rejecting mismatched extents and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        Self::check_shape(&shape, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("Tensor::new (element {pos})"),
            });
        }
        Ok(Self { shape, data })
    }

    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("Tensor::new", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != len {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} holds {n} elements but data has {len}"),
            ));
        }
        Ok(())
    }

    /// Internal constructor for kernel outputs; shape is trusted.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(v: T) -> Self {
        Self::raw(vec![1], vec![v])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![v; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::check_shape(shape, self.data.len())?;
        Ok(Self::raw(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::raw(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}
