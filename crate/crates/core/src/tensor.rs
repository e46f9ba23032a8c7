//! Dense row-major `f64` tensors.

use crate::error::{Error, Result};

/// A dense n-dimensional array of `f64` values in row-major order, with an
/// optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.values.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            grad: None,
            requires_grad: false,
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Rows and columns when viewed as a matrix. Vectors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            more => {
                let c = *more.last().unwrap();
                (self.numel() / c.max(1), c)
            }
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        let (_, c) = self.dims2();
        self.values[row * c + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.values[row * c..(row + 1) * c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.values[0])
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                delta.len(),
                self.shape
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        grad.iter_mut().zip(delta).for_each(|(g, d)| *g += d);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.values.len()]);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
