//! Dense row-major f64 tensors.
//!
//! `Tensor` is a plain value type: shape plus flat row-major storage. Tape
//! membership is handled separately (see [`crate::tape`]); tensors that are
//! not on a tape are immutable values and safe to share across threads.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_string, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                detail: format!("zero dimension in {}", shape_string(&shape)),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                detail: format!(
                    "shape {} implies {} values, got {}",
                    shape_string(&shape),
                    numel,
                    values.len()
                ),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel] }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![1.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], values: vec![value] }
    }

    /// 2-D tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidShape {
                op: "Tensor::from_rows",
                detail: "rows must be nonempty and rectangular".to_string(),
            });
        }
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            values.extend_from_slice(row);
        }
        Ok(Tensor { shape: vec![r, c], values })
    }

    /// Uniform values in [0, 1).
    pub fn rand_uniform<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| rng.gen::<f64>()).collect();
        Tensor { shape, values }
    }

    /// Independent normal draws with the given mean and standard deviation.
    pub fn rand_normal<R: Rng>(shape: Vec<usize>, mean: f64, std_dev: f64, rng: &mut R) -> Self {
        let normal = Normal::new(mean, std_dev).expect("std_dev must be finite and positive");
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor { shape, values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::InvalidShape {
                op: "Tensor::item",
                detail: format!("expected scalar, got {}", shape_string(&self.shape)),
            });
        }
        Ok(self.values[0])
    }

    /// Element of a 2-D tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.values[row * self.shape[1] + col]
    }

    /// Row slice of a 2-D tensor.
    pub fn row(&self, row: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &self.values[row * cols..(row + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

// ── Raw row-major kernels ───────────────────────────────────────────

/// C = A · B with A [m×k], B [k×n].
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C = A · Bᵀ with A [m×k], B [n×k].
pub(crate) fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// C = Aᵀ · B with A [m×k], B [m×n].
pub(crate) fn matmul_tn_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = a[p * k + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}
