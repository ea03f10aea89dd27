//! Dense row-major arrays and a taped reverse-mode differentiation graph.
//!
//! [`Tensor`] is a plain value. Differentiable computation happens on
//! [`Var`] handles owned by a [`Graph`]; every operation records a node with
//! its backward rule, and [`Graph::backward`] walks the tape in reverse.

mod conv;
mod graph;
pub mod io;
mod linalg;
mod nn;
mod ops;

pub use conv::Conv1dMode;
pub use graph::{Gradients, Graph, Var};
#[cfg(test)]
pub(crate) use nn::gelu as gelu_scalar;

use rand::Rng;

use crate::error::{Error, Result};

/// An N-dimensional array of `f64` values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Values drawn from `uniform(-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Row-major flat index of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elements at `start + i * step` along every axis.
    pub fn strided_slice(&self, start: &[usize], step: &[usize]) -> Result<Self> {
        let out_shape = strided_shape(&self.shape, start, step)?;
        let mut out = Tensor::zeros(&out_shape);
        for_each_strided(&self.shape, start, step, |dst, src| out.data[dst] = self.data[src]);
        Ok(out)
    }

    /// Writes `part` into the positions `start + i * step`; the inverse of
    /// [`Tensor::strided_slice`].
    pub fn strided_assign(&mut self, part: &Tensor, start: &[usize], step: &[usize]) -> Result<()> {
        let expect = strided_shape(&self.shape, start, step)?;
        if expect != part.shape {
            return Err(Error::shape(
                "strided_assign",
                format!("expected part {expect:?}, got {:?}", part.shape),
            ));
        }
        let shape = self.shape.clone();
        for_each_strided(&shape, start, step, |dst, src| self.data[src] = part.data[dst]);
        Ok(())
    }
}

pub(crate) fn strided_shape(shape: &[usize], start: &[usize], step: &[usize]) -> Result<Vec<usize>> {
    if start.len() != shape.len() || step.len() != shape.len() {
        return Err(Error::shape(
            "strided_slice",
            format!("rank {} with start {start:?} step {step:?}", shape.len()),
        ));
    }
    shape
        .iter()
        .zip(start.iter().zip(step))
        .map(|(&n, (&s, &p))| {
            if p == 0 || s >= p || p > n {
                Err(Error::invalid(
                    "strided_slice",
                    format!("need 0 <= start < step <= len, got start {s} step {p} len {n}"),
                ))
            } else {
                Ok((n - s).div_ceil(p))
            }
        })
        .collect()
}

/// Calls `f(out_flat, in_flat)` for every element of a strided view.
pub(crate) fn for_each_strided(
    shape: &[usize],
    start: &[usize],
    step: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(start.iter().zip(step))
        .map(|(&n, (&s, &p))| (n - s).div_ceil(p))
        .collect();
    let numel: usize = out_shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for dst in 0..numel {
        let mut src = 0;
        for k in 0..shape.len() {
            src = src * shape[k] + start[k] + idx[k] * step[k];
        }
        f(dst, src);
        for k in (0..shape.len()).rev() {
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_slice_1d() {
        let t = Tensor::new(&[6], (0..6).map(f64::from).collect()).unwrap();
        let s = t.strided_slice(&[1], &[2]).unwrap();
        assert_eq!(s.data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn strided_slice_identity_stays_identity() {
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.set(&[i, i], 1.0);
        }
        let s = eye.strided_slice(&[0, 0], &[2, 2]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn strided_slice_hand_enumerated() {
        // rows {0}, cols {1, 3} of [[0 1 2 3] [4 5 6 7]]
        let t = Tensor::new(&[2, 4], (0..8).map(f64::from).collect()).unwrap();
        let s = t.strided_slice(&[0, 1], &[2, 2]).unwrap();
        assert_eq!(s.shape(), &[1, 2]);
        assert_eq!(s.data(), &[1.0, 3.0]);
    }

    #[test]
    fn strided_slice_rejects_bad_offsets() {
        let t = Tensor::zeros(&[4]);
        assert!(t.strided_slice(&[2], &[2]).is_err());
        assert!(t.strided_slice(&[0], &[0]).is_err());
        assert!(t.strided_slice(&[0], &[5]).is_err());
    }

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::scalar(3.0).numel(), 1);
    }
}
