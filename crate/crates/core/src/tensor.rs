//! Dense row-major tensor storage.
//!
//! [`TensorBase`] is a flat buffer plus a shape; the crate-root alias `Tensor`
//! fixes the scalar to f64. Differentiable computation lives on the gradient
//! tape (`tape` module); the methods here are plain eager math used for data
//! handling, schedules and tests.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBase<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> TensorBase<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, buffer holds {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(TensorBase { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        TensorBase { shape: shape.to_vec(), data: vec![F::zero(); numel] }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let numel = shape.iter().product();
        TensorBase { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn scalar(v: F) -> Self {
        TensorBase { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        TensorBase { shape: vec![data.len()], data }
    }

    /// Gaussian-initialized tensor with standard deviation `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| F::from_f64_c(rng.next_normal() * std)).collect();
        TensorBase { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Row/column count of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(format!("expected 2-D tensor, got shape {other:?}"))),
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> F {
        let cols = self.shape[1];
        self.data[r * cols + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: F) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds for axis {i} (len {dim})");
            off = off * dim + ix;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> F {
        self.data[self.offset(idx)]
    }

    pub fn at_mut(&mut self, idx: &[usize]) -> &mut F {
        let off = self.offset(idx);
        &mut self.data[off]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) into {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                numel
            )));
        }
        Ok(TensorBase { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        TensorBase { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn zip(&self, other: &Self, op: &str, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: lhs shape {:?} vs rhs shape {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(TensorBase { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Self) -> Result<Self> {
        self.zip(other, "mul_elem", |a, b| a * b)
    }

    pub fn scale(&self, c: F) -> Self {
        self.map(|x| x * c)
    }

    /// 2-D matrix product, ikj loop order.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: lhs shape {:?} vs rhs shape {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == F::zero() {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] = dst[j] + a * row[j];
                }
            }
        }
        TensorBase::new(vec![m, n], out)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        TensorBase::new(vec![c, r], out)
    }

    pub fn sum(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &x| acc + x)
    }

    /// Checked mode for NaN/Inf detection: reports the first offending flat
    /// index and value.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::numeric(format!(
                    "{context}: non-finite value {v} at flat index {i} (shape {:?})",
                    self.shape
                )));
            }
        }
        Ok(())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x.to_f64_c()).collect()
    }
}

impl TensorBase<f64> {
    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        TensorBase::new(shape.to_vec(), data.to_vec())
    }
}
