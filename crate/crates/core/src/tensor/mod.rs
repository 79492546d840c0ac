//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is a plain row-major value. Differentiation happens on a
//! [`Tape`]: inputs are registered as leaves, every op appends a node, and
//! [`Tape::backward`] walks the nodes in reverse exactly once. There is no
//! global autograd state; each forward pass owns its tape.

mod gemm;
mod kernels;
mod ops;
mod tape;

pub use kernels::{entmax15, gelu, ConvGeometry};
pub use tape::{Gradients, Tape, Var};

use crate::error::{dim_err, Result};
use std::fmt;

/// Element type of every tensor. 64-bit unless the `f32` feature is on.
#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

/// Dense n-dimensional array in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Scalar>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel,
                data.len()
            ));
        }
        if shape.iter().any(|&s| s == 0) {
            return Err(dim_err!("shape {:?} has a zero-length axis", shape));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose shape/data agreement is guaranteed by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Scalar>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: Scalar) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: Scalar) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_vec(data: Vec<Scalar>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Row-major 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[Scalar]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor { shape: vec![rows.len(), cols], data }
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

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Scalar {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(Scalar) -> Scalar) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sum using pairwise reduction so large sums are order-stable.
    pub fn sum_all(&self) -> Scalar {
        pairwise_sum(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Scalar {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Scalar::max)
    }

    /// Element at a multi-index. Intended for tests and small lookups.
    pub fn at(&self, index: &[usize]) -> Scalar {
        self.data[offset(&self.shape, index)]
    }

    /// Copy of the sub-tensor at `index` along axis 0.
    pub fn index0(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let start = index * inner;
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[start..start + inner].to_vec(),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

pub(crate) fn offset(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    let mut off = 0;
    for (&s, &i) in shape.iter().zip(index) {
        assert!(i < s, "index {:?} out of bounds for {:?}", index, shape);
        off = off * s + i;
    }
    off
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

/// Pairwise summation; error grows with log(n) instead of n.
pub fn pairwise_sum(xs: &[Scalar]) -> Scalar {
    const BLOCK: usize = 128;
    if xs.len() <= BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(offset(&[2, 3, 4], &[1, 2, 3]), 23);
    }

    #[test]
    fn pairwise_sum_is_order_stable() {
        let xs: Vec<Scalar> = (0..20_000).map(|i| ((i * 7919) % 1000) as Scalar * 1e-3).collect();
        let mut rev = xs.clone();
        rev.reverse();
        assert!((pairwise_sum(&xs) - pairwise_sum(&rev)).abs() < 1e-9);
    }
}
