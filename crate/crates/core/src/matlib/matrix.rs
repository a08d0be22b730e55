use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Value type: every arithmetic helper returns a fresh matrix and never
/// mutates its operands.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Both dimensions must be positive.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim(format!("matrix dimensions must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from a slice of equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(r, c, rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_range(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ * rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::dim(format!(
                "cannot multiply ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let lhs_row = self.row(k);
            let rhs_row = rhs.row(k);
            for (i, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(lhs_row, rhs.row(j));
            }
        }
        Ok(out)
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "{op}: shapes {}x{} and {}x{} differ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &Matrix) -> Result<Self> {
        self.check_same_shape(other, "axpy")?;
        Ok(self.zip_map(other, |a, b| a + alpha * b))
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Frobenius inner product `⟨self, other⟩`.
    pub fn inner(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "inner")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// Largest elementwise absolute difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()))
    }

    /// `‖self − other‖_F / ‖other‖_F`, or the absolute error when `other` is zero.
    pub fn rel_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "rel_diff: shape mismatch");
        let num = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den = other.frobenius_norm();
        if den > 0.0 {
            num / den
        } else {
            num
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0` and comparing NaN payloads.
    pub fn bitwise_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Square root of the sum of squared entries.
pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity of the flattened matrices.
pub fn cosine_similarity_flat(a: &Matrix, b: &Matrix) -> Result<f64> {
    let ip = a.inner(b)?;
    let na = a.frobenius_norm();
    let nb = b.frobenius_norm();
    if na < 1e-300 || nb < 1e-300 {
        return Err(Error::ZeroVector);
    }
    Ok((ip / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 2)), 0.0);
        assert_eq!(frobenius_norm(&Matrix::from_rows(&[&[3.0, 4.0]]).unwrap()), 5.0);
        for r in 1..6 {
            let n = frobenius_norm(&Matrix::identity(r));
            assert!((n - (r as f64).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_examples() {
        let a = Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap();
        assert!((cosine_similarity_flat(&a, &a).unwrap() - 1.0).abs() < 1e-15);

        let e1 = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        let e2 = Matrix::from_rows(&[&[0.0, 1.0]]).unwrap();
        assert_eq!(cosine_similarity_flat(&e1, &e2).unwrap(), 0.0);

        let ones = Matrix::from_rows(&[&[1.0, 1.0]]).unwrap();
        let c = cosine_similarity_flat(&ones, &e1).unwrap();
        assert!((c - 0.7071067811865475).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_and_mismatched() {
        let z = Matrix::zeros(1, 2);
        let e1 = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        assert!(matches!(cosine_similarity_flat(&z, &e1), Err(Error::ZeroVector)));
        assert!(matches!(
            cosine_similarity_flat(&Matrix::zeros(2, 1), &e1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn products_agree() {
        let a = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, -1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab, Matrix::from_rows(&[&[7.0, -1.0], &[16.0, -1.0]]).unwrap());
        assert_eq!(a.transpose().t_matmul(&b).unwrap(), ab);
        assert_eq!(a.matmul_t(&b.transpose()).unwrap(), ab);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn constructor_validates() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
        assert!(Matrix::from_rows(&[&[1.0], &[1.0, 2.0]]).is_err());
    }
}
