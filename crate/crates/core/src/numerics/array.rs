//! Dense row-major arrays.
//!
//! Everything that flows through the network is a `NumArray`. Most code treats
//! arrays as matrices: the last axis is the column axis and every leading axis
//! is folded into rows, so a 1-D array of length `n` is a `1 x n` row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumArray {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl NumArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    /// 2-D array from `rows x cols` row-major values. Panics on a length mismatch.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols} given {} values", data.len());
        Self { shape: vec![rows, cols], data, requires_grad: false, grad: None }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self::matrix(1, data.len(), data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::matrix(1, 1, vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
            return Err(Error::dim(format!("row {i} has {} columns, expected {cols}", r.len())));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self::matrix(rows.len(), cols, data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let c = self.cols();
        self.data[row * c + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), n);
        }
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `scale * g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64], scale: f64) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += scale * v;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Largest absolute elementwise difference; infinite if the shapes differ.
    pub fn max_abs_diff(&self, other: &NumArray) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }
}
