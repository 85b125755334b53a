//! Dense row-major f64 matrices and vectors.
//!
//! Everything the differentiable graph touches is a `Tensor`: parameter
//! matrices are `(rows, cols)`, activations are column vectors `(n, 1)` and
//! scalars are `(1, 1)`. Double precision throughout so finite-difference
//! checks are meaningful.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Value of a (1,1) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_vector(&self) -> bool {
        self.cols == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix-vector product `self * v` for a `(m, n)` matrix and `(n, 1)` vector.
    pub fn matvec(&self, v: &Tensor) -> Tensor {
        assert_eq!(v.cols, 1, "matvec expects a column vector");
        assert_eq!(self.cols, v.rows, "matvec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for (r, slot) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(v.data.iter()) {
                acc += a * b;
            }
            *slot = acc;
        }
        Tensor {
            rows: self.rows,
            cols: 1,
            data: out,
        }
    }

    /// Transposed matrix-vector product `self^T * v`.
    pub fn t_matvec(&self, v: &Tensor) -> Tensor {
        assert_eq!(v.cols, 1, "t_matvec expects a column vector");
        assert_eq!(self.rows, v.rows, "t_matvec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let g = v.data[r];
            if g == 0.0 {
                continue;
            }
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (slot, a) in out.iter_mut().zip(row.iter()) {
                *slot += g * a;
            }
        }
        Tensor {
            rows: self.cols,
            cols: 1,
            data: out,
        }
    }

    /// Outer product of two column vectors: `a * b^T`.
    pub fn outer(a: &Tensor, b: &Tensor) -> Tensor {
        assert!(a.cols == 1 && b.cols == 1, "outer expects column vectors");
        let mut data = vec![0.0; a.rows * b.rows];
        for r in 0..a.rows {
            let av = a.data[r];
            if av == 0.0 {
                continue;
            }
            for c in 0..b.rows {
                data[r * b.rows + c] = av * b.data[c];
            }
        }
        Tensor {
            rows: a.rows,
            cols: b.rows,
            data,
        }
    }

    pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
        assert_eq!(a.shape(), b.shape(), "dot shape mismatch");
        a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, factor: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += factor * b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Numerically stable log-softmax of a slice.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|&v| (v - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&v| v - lse).collect()
}
