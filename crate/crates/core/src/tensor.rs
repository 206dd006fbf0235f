//! Dense row-major `f64` matrix and vector primitives.
//!
//! These are the only numeric containers in the crate; every model, masking,
//! and recovery operation is built from the handful of ops below. Shapes are
//! validated at the public boundary and results are checked finite, so a
//! numeric failure surfaces as a typed error where it happens instead of a
//! NaN drifting through a training run. Deserialization revalidates both the
//! shape bookkeeping and finiteness, which is what lets the wire codec reject
//! malformed payloads without extra schema machinery.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense matrix, row-major: entry `(r, c)` lives at `data[r * cols + c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawVector")]
pub struct Vector {
    data: Vec<f64>,
}

// Shadow types so deserialization goes through the same validation as the
// public constructors.
#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawVector {
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = String;

    fn try_from(raw: RawMatrix) -> std::result::Result<Self, String> {
        Matrix::from_data(raw.rows, raw.cols, raw.data).map_err(|e| e.to_string())
    }
}

impl TryFrom<RawVector> for Vector {
    type Error = String;

    fn try_from(raw: RawVector) -> std::result::Result<Self, String> {
        Vector::from_data(raw.data).map_err(|e| e.to_string())
    }
}

fn ensure_all_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::domain(
            op,
            format!("non-finite value {} at flat index {idx}", values[idx]),
        ));
    }
    Ok(())
}

impl Matrix {
    /// All-zeros matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Build from an explicit row-major buffer; rejects length mismatches and
    /// non-finite entries.
    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        ensure_all_finite("matrix", &data)?;
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(Error::shape(
                    "matrix",
                    format!("row {i} has {} entries, expected {n_cols}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_data(n_rows, n_cols, data)
    }

    /// Build entry-by-entry from a function of `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Matrix {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    /// Row-major view of the underlying buffer.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// One row as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        Ok(())
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "hadamard")?;
        let data: Vec<f64> =
            self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        ensure_all_finite("hadamard", &data)?;
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Elementwise reciprocal. Errors on zero entries and on results that
    /// overflow (reciprocals of subnormals exceed the f64 range).
    pub fn hadamard_reciprocal(&self) -> Result<Matrix> {
        if let Some(idx) = self.data.iter().position(|&v| v == 0.0) {
            return Err(Error::domain(
                "hadamard_reciprocal",
                format!("zero entry at ({}, {})", idx / self.cols, idx % self.cols),
            ));
        }
        let data: Vec<f64> = self.data.iter().map(|v| 1.0 / v).collect();
        ensure_all_finite("hadamard_reciprocal", &data)?;
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Matrix-vector product `A v`.
    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if self.cols != v.len() {
            return Err(Error::shape(
                "matvec",
                format!("{}x{} times vector of length {}", self.rows, self.cols, v.len()),
            ));
        }
        let mut out = vec![0.0; self.rows];
        for (r, slot) in out.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(&v.data) {
                acc += a * b;
            }
            *slot = acc;
        }
        ensure_all_finite("matvec", &out)?;
        Ok(Vector { data: out })
    }

    /// Transposed product `Aᵀ v`, used by backpropagation without
    /// materializing the transpose.
    pub fn matvec_t(&self, v: &Vector) -> Result<Vector> {
        if self.rows != v.len() {
            return Err(Error::shape(
                "matvec_t",
                format!("{}x{} transposed times vector of length {}", self.rows, self.cols, v.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let coeff = v.data[r];
            for (c, slot) in out.iter_mut().enumerate() {
                *slot += coeff * self.data[r * self.cols + c];
            }
        }
        ensure_all_finite("matvec_t", &out)?;
        Ok(Vector { data: out })
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &Vector, v: &Vector) -> Matrix {
        Matrix::from_fn(u.len(), v.len(), |r, c| u.data[r] * v.data[c])
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Every entry multiplied by a scalar.
    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// In-place `self += c * other`; the workhorse of weighted aggregation.
    pub fn axpy(&mut self, c: f64, other: &Matrix) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Frobenius norm.
    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Vector {
    /// All-zeros vector.
    pub fn zeros(len: usize) -> Vector {
        Vector { data: vec![0.0; len] }
    }

    /// Build from a buffer; rejects non-finite entries.
    pub fn from_data(data: Vec<f64>) -> Result<Vector> {
        ensure_all_finite("vector", &data)?;
        Ok(Vector { data })
    }

    /// Build entry-by-entry from a function of the index.
    pub fn from_fn(len: usize, f: impl FnMut(usize) -> f64) -> Vector {
        Vector { data: (0..len).map(f).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn set(&mut self, i: usize, v: f64) {
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&self) -> Vector {
        Vector { data: self.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect() }
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "hadamard",
                format!("vector lengths {} vs {}", self.len(), other.len()),
            ));
        }
        let data: Vec<f64> =
            self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        ensure_all_finite("hadamard", &data)?;
        Ok(Vector { data })
    }

    /// Elementwise reciprocal with the same domain rules as the matrix op.
    pub fn reciprocal(&self) -> Result<Vector> {
        if let Some(idx) = self.data.iter().position(|&v| v == 0.0) {
            return Err(Error::domain("reciprocal", format!("zero entry at index {idx}")));
        }
        let data: Vec<f64> = self.data.iter().map(|v| 1.0 / v).collect();
        ensure_all_finite("reciprocal", &data)?;
        Ok(Vector { data })
    }

    /// Dot product.
    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "dot",
                format!("vector lengths {} vs {}", self.len(), other.len()),
            ));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Sum of all entries.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "add",
                format!("vector lengths {} vs {}", self.len(), other.len()),
            ));
        }
        Ok(Vector { data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect() })
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "sub",
                format!("vector lengths {} vs {}", self.len(), other.len()),
            ));
        }
        Ok(Vector { data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect() })
    }

    /// Every entry multiplied by a scalar.
    pub fn scale(&self, c: f64) -> Vector {
        Vector { data: self.data.iter().map(|v| v * c).collect() }
    }

    /// Largest absolute entry (0 for an empty vector).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}
