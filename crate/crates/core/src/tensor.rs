//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense row-major tensor with an optional gradient buffer.
///
/// Zero-sized dimensions are allowed so that an adapter pruned down to no
/// hidden neurons can still be represented.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
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

    /// Number of rows when viewed as a matrix over the last dimension.
    pub fn rows(&self) -> usize {
        match self.shape.last() {
            Some(&0) | None => 0,
            Some(&c) => self.data.len() / c,
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning gradients off also drops any stored gradient.
    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Adds `delta` into the gradient buffer. Frozen tensors ignore the call
    /// and never allocate a buffer.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if delta.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of length {}",
                delta.len(),
                self.data.len()
            )));
        }
        let grad = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    /// Fails if any value or gradient entry is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        let grad_ok = self
            .grad
            .as_ref()
            .is_none_or(|g| g.iter().all(|x| x.is_finite()));
        if self.data.iter().all(|x| x.is_finite()) && grad_ok {
            Ok(())
        } else {
            Err(Error::NonFinite { op: "tensor" })
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|x| U::of(x.as_f64())).collect()),
        }
    }

    /// Keeps the listed rows of a 2-D tensor, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(&self.data[r * c..(r + 1) * c]);
        }
        Self {
            shape: vec![rows.len(), c],
            data,
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Keeps the listed columns of a 2-D tensor, in the given order.
    pub fn select_cols(&self, cols: &[usize]) -> Self {
        let c = self.cols();
        let r = self.rows();
        let mut data = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            for &j in cols {
                data.push(self.data[i * c + j]);
            }
        }
        Self {
            shape: vec![r, cols.len()],
            data,
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}
