//! Dense row-major tensors, the recording tape, and the deterministic RNG.
//!
//! Images use `(batch, height, width, channels)` layout. Every differentiable
//! operation lives on [`Var`] and records its backward rule on a [`Tape`].

mod element;
pub(crate) mod ops;
mod rng;
mod tape;

use std::fmt;
use std::sync::Arc;

pub use element::{DType, Element};
pub use ops::ReduceOp;
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Immutable n-dimensional array. Cloning is cheap (the buffer is shared).
#[derive(Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                reason: format!("{} elements do not fill the shape", data.len()),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for buffers whose length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "shape {shape:?}");
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::from_parts(shape, vec![value; n])
    }

    pub fn scalar(value: F) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| F::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        F::DTYPE
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.data.as_ref().clone()
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<F> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected a single element".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<G: Element>(&self) -> Tensor<G> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| G::lit(v.as_f64())).collect(),
        )
    }

    pub fn sum_all(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &v| acc + v)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        let lead = *self.shape.first().ok_or_else(|| Error::InvalidShape {
            shape: self.shape.clone(),
            reason: "cannot slice a scalar".into(),
        })?;
        if start > end || end > lead {
            return Err(Error::InvalidArgument(format!(
                "batch slice {start}..{end} out of range for extent {lead}"
            )));
        }
        let row = self.len() / lead.max(1);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self::from_parts(
            shape,
            self.data[start * row..end * row].to_vec(),
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<F>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| {
            Error::InvalidArgument("cannot stack an empty list of tensors".into())
        })?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for item in items {
            if item.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &item.shape));
            }
            data.extend_from_slice(item.data());
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }
}

impl<F: Element> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor<{:?}>{:?} [", F::DTYPE, self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.len() > PREVIEW {
            write!(f, ", ... ({} total)", self.len())?;
        }
        write!(f, "]")
    }
}
