use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::kernels;

/// Dense n-dimensional f64 array, row-major and contiguous.
///
/// Slicing copies; there are no strided views. `grad` is populated by
/// [`super::Tape::write_grads`] after a backward pass for tensors that were
/// registered with `requires_grad` set.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} requires {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], data: vec![x], requires_grad: false, grad: None }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false, grad: None }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows when viewed as a 2-D matrix (all axes but the last).
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has no dimensions")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    // ── eager forward ops ────────────────────────────────────────────

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Dimension(format!(
                "matmul: incompatible shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        kernels::mm_nn(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    /// self[m×k] · other[n×k]ᵀ
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[1] {
            return Err(Error::Dimension(format!(
                "matmul_nt: incompatible shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[0]);
        let mut out = vec![0.0; m * n];
        kernels::mm_nt(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Dimension(format!(
                "softmax: axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax: non-finite input".into()));
        }
        if axis == self.rank() - 1 {
            let mut out = vec![0.0; self.numel()];
            kernels::softmax_rows(&self.data, self.rows(), self.last_dim(), &mut out);
            return Tensor::new(self.shape.clone(), out);
        }
        // Move `axis` last, softmax, move back.
        let rank = self.rank();
        let mut perm: Vec<usize> = (0..rank).filter(|&d| d != axis).collect();
        perm.push(axis);
        let permuted = self.permute(&perm)?;
        let sm = permuted.softmax(rank - 1)?;
        let mut inv = vec![0usize; rank];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        sm.permute(&inv)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        if perm.len() != self.rank() {
            return Err(Error::Dimension(format!(
                "permute: perm {:?} does not match rank {}",
                perm,
                self.rank()
            )));
        }
        let mut out = vec![0.0; self.numel()];
        kernels::permute_copy(&self.data, &self.shape, perm, &mut out);
        let shape = perm.iter().map(|&p| self.shape[p]).collect();
        Tensor::new(shape, out)
    }

    pub fn gelu(&self) -> Tensor {
        self.map(kernels::gelu)
    }

    pub fn log(&self) -> Tensor {
        self.map(f64::ln)
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.numel() as f64
    }

    /// Layer norm over the last axis, no affine terms, ε = 1e-5.
    pub fn layer_norm(&self) -> Tensor {
        let mut out = vec![0.0; self.numel()];
        kernels::layer_norm_rows(&self.data, self.rows(), self.last_dim(), super::LN_EPS, &mut out);
        Tensor { shape: self.shape.clone(), data: out, requires_grad: false, grad: None }
    }

    /// Row-wise x / max(‖x‖₂, 1e-12).
    pub fn l2_normalize(&self) -> Tensor {
        let mut out = vec![0.0; self.numel()];
        kernels::l2_normalize_rows(&self.data, self.rows(), self.last_dim(), super::L2_EPS, &mut out);
        Tensor { shape: self.shape.clone(), data: out, requires_grad: false, grad: None }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    fn zip(&self, other: &Tensor, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
            requires_grad: false,
            grad: None,
        })
    }
}
