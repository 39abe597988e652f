//! Dense NCHW tensors.
//!
//! Every activation, parameter and gradient is a [`Tensor`] with exactly four
//! extents `(n, c, h, w)`. Vectors are stored as `(len, 1, 1, 1)`, feature
//! matrices as `(rows, cols, 1, 1)` and scalars as `(1, 1, 1, 1)`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

pub type Dims = [usize; 4];

/// Element type of a tensor. Model state uses `f32`; gradient oracles run in `f64`.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Dims,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("requires_grad", &self.requires_grad)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

#[inline]
pub fn numel(dims: Dims) -> usize {
    dims.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: Dims) -> Self {
        Self::full(dims, T::one())
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Self { dims, data: vec![value; numel(dims)], requires_grad: false, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Builds a tensor from caller-supplied data, rejecting length mismatches
    /// and non-finite values.
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != numel(dims) {
            return Err(shape_err!("dims {:?} need {} elements, got {}", dims, numel(dims), data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("element {i} of tensor {dims:?}")));
        }
        Ok(Self::from_raw(dims, data))
    }

    /// Unchecked constructor for kernels whose outputs are already validated.
    pub(crate) fn from_raw(dims: Dims, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), numel(dims));
        Self { dims, data, requires_grad: false, grad: None }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(numel(dims));
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Self::from_raw(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.dims == [1, 1, 1, 1]
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

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.dims;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(slot) => slot.iter_mut().zip(g).for_each(|(s, &v)| *s += v),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-type conversion (value only; gradients are dropped).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Same data under new extents with equal element count.
    pub fn reshape(mut self, dims: Dims) -> Result<Self> {
        if numel(dims) != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.dims, dims));
        }
        self.dims = dims;
        self.grad = None;
        Ok(self)
    }

    /// Samples `[start, start + len)` along the batch axis.
    pub fn batch_slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.dims[0] {
            return Err(shape_err!("batch slice {start}+{len} out of {:?}", self.dims));
        }
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        let data = self.data[start * per..(start + len) * per].to_vec();
        Ok(Self::from_raw([len, self.dims[1], self.dims[2], self.dims[3]], data))
    }

    /// Stacks tensors along the batch axis.
    pub fn concat_batch(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.dims[1..] != [c, h, w] {
                return Err(shape_err!("concat mismatch {:?} vs {:?}", first.dims, p.dims));
            }
            n += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_raw([n, c, h, w], data))
    }

    /// Bitwise equality of values and extents.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.dims == other.dims
            && self.data.iter().zip(&other.data).all(|(a, b)| a.f64().to_bits() == b.f64().to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data.iter().zip(&other.data).map(|(a, b)| (a.f64() - b.f64()).abs()).fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length_and_finiteness() {
        assert!(Tensor::<f32>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        let err = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![0.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        let t = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(t.numel(), 2);
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::<f32>::from_fn([2, 3, 4, 5], |[n, c, h, w]| (n * 1000 + c * 100 + h * 10 + w) as f32);
        assert_eq!(t.at([1, 2, 3, 4]), 1234.0);
        assert_eq!(t.data()[t.offset([1, 0, 0, 0])], 1000.0);
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut t = Tensor::<f32>::zeros([1, 1, 1, 2]).with_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn batch_slice_and_concat_invert() {
        let t = Tensor::<f32>::from_fn([3, 2, 2, 2], |[n, c, h, w]| (n * 8 + c * 4 + h * 2 + w) as f32);
        let a = t.batch_slice(0, 1).unwrap();
        let b = t.batch_slice(1, 2).unwrap();
        assert!(Tensor::concat_batch(&[&a, &b]).unwrap().bit_eq(&t));
    }
}
