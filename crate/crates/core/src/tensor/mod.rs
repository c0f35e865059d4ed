//! Dense row-major `f64` tensors, forward kernels, and a reverse-mode tape.
//!
//! [`Tensor`] is a plain value. Differentiation happens on a [`Graph`], which
//! records primitive ops over [`Var`] handles and owns the gradient slots.

mod graph;
mod io;
pub mod kernels;

pub use graph::{Corruption, Graph, Var, IGNORE_LABEL};
pub(crate) use io::read_exact as read_exact_pub;
pub use io::{read_tensor, read_tensor_from, write_tensor, write_tensor_to, TENSOR_MAGIC, TENSOR_VERSION};
pub use kernels::ConvSpec;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {numel} elements but buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Builds a 2-D tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
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

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Element at a multi-index. Panics on out-of-range indices.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            assert!(i < extent, "index {index:?} out of range for {:?}", self.shape);
            flat = flat * extent + i;
        }
        self.data[flat]
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.rank(), 2, "row() needs a matrix");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    // Pure forward counterparts of the graph ops, convenient for inference
    // and for tests that do not need gradients.

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = kernels::expect_matrix(self.shape(), "matmul lhs")?;
        let (k2, n) = kernels::expect_matrix(other.shape(), "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Tensor::new(vec![m, n], out)
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, n) = kernels::expect_matrix(self.shape(), "softmax_rows")?;
        let mut out = self.data.clone();
        kernels::softmax_rows_inplace(&mut out, n);
        Tensor::new(self.shape.clone(), out)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(kernels::sigmoid)
    }

    pub fn conv2d(&self, weight: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(self.clone());
        let w = g.constant(weight.clone());
        let y = g.conv2d(x, w, spec)?;
        Ok(g.value(y).clone())
    }

    pub fn unfold(&self, k: usize) -> Result<Tensor> {
        let (c, h, w) = kernels::expect_chw(self.shape(), "unfold")?;
        kernels::check_window(k)?;
        let mut out = vec![0.0; h * w * c * k * k];
        kernels::unfold_forward(&self.data, c, h, w, k, &mut out);
        Tensor::new(vec![h * w, c, k * k], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = kernels::expect_matrix(self.shape(), "transpose")?;
        Tensor::new(vec![n, m], kernels::transpose(&self.data, m, n))
    }
}
