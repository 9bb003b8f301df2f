//! Dense row-major `f64` matrices.
//!
//! Products go through `matrixmultiply`'s blocked kernels. Large products are
//! split into fixed 64-row blocks that rayon may run concurrently; the block
//! size does not depend on the thread count, so results are bit-identical for
//! any pool size.

use rayon::prelude::*;

use crate::error::{Error, Result};

const ROW_BLOCK: usize = 64;
const PARALLEL_WORK: usize = 1 << 18;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has {} entries, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    /// A single-column matrix.
    pub fn column_vector(values: &[f64]) -> Self {
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact panics on zero width
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!("vstack of {} and {} columns", self.cols, other.cols)));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix { rows: self.rows + other.rows, cols: self.cols, data })
    }

    /// Concatenates columns: `[self | other]`.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!("hstack of {} and {} rows", self.rows, other.rows)));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Matrix { rows: self.rows, cols, data })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            GemmOperand { data: &self.data, row_stride: self.cols, col_stride: 1 },
            GemmOperand { data: &other.data, row_stride: other.cols, col_stride: 1 },
            0.0,
            &mut out.data,
        );
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "matmul_tn {}x{} (transposed) by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            GemmOperand { data: &self.data, row_stride: 1, col_stride: self.cols },
            GemmOperand { data: &other.data, row_stride: other.cols, col_stride: 1 },
            0.0,
            &mut out.data,
        );
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_nt {}x{} by {}x{} (transposed)",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            GemmOperand { data: &self.data, row_stride: self.cols, col_stride: 1 },
            GemmOperand { data: &other.data, row_stride: 1, col_stride: other.cols },
            0.0,
            &mut out.data,
        );
        Ok(out)
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op} of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    #[must_use]
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    #[must_use]
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a * b)
    }

    #[must_use]
    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, "elementwise op")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    #[must_use]
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    #[must_use]
    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    /// Adds `v` to every row.
    #[must_use]
    pub fn add_row_vector(&self, v: &[f64]) -> Result<Matrix> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!("row vector of length {} for {} columns", v.len(), self.cols)));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (x, &b) in out.row_mut(i).iter_mut().zip(v) {
                *x += b;
            }
        }
        Ok(out)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.row_iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    pub fn col_means(&self) -> Vec<f64> {
        let n = self.rows.max(1) as f64;
        self.col_sums().into_iter().map(|s| s / n).collect()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `log Σ_j exp(m_ij)` for every row.
    pub fn logsumexp_rows(&self) -> Vec<f64> {
        self.row_iter().map(logsumexp).collect()
    }

    /// `log Σ_i exp(m_ij)` for every column.
    pub fn logsumexp_cols(&self) -> Vec<f64> {
        let mut max = vec![f64::NEG_INFINITY; self.cols];
        for r in self.row_iter() {
            for (m, &v) in max.iter_mut().zip(r) {
                if v > *m {
                    *m = v;
                }
            }
        }
        let mut acc = vec![0.0; self.cols];
        for r in self.row_iter() {
            for ((a, &m), &v) in acc.iter_mut().zip(&max).zip(r) {
                if m.is_finite() {
                    *a += (v - m).exp();
                }
            }
        }
        max.iter().zip(&acc).map(|(&m, &a)| if m.is_finite() { m + a.ln() } else { m }).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// `(A + Aᵀ) / 2`; requires a square matrix.
    pub fn symmetrize(&self) -> Result<Matrix> {
        if self.rows != self.cols {
            return Err(Error::Shape(format!("symmetrize of non-square {}x{}", self.rows, self.cols)));
        }
        let n = self.rows;
        let mut out = self.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with the flat index of the first non-finite entry.
    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { what, index }),
            None => Ok(()),
        }
    }
}

/// Numerically stable `log Σ exp(x)`. Empty input gives `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Copy)]
pub(crate) struct GemmOperand<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl GemmOperand<'_> {
    fn assert_covers(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "gemm operand out of bounds");
        }
    }
}

/// `c = a·b + beta·c` with `a` m×k, `b` k×n and `c` a dense row-major m×n buffer.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: GemmOperand, b: GemmOperand, beta: f64, c: &mut [f64]) {
    assert_eq!(c.len(), m * n, "gemm output buffer");
    a.assert_covers(m, k);
    b.assert_covers(k, n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let block = |row0: usize, rows: usize, c_block: &mut [f64]| {
        // SAFETY: bounds of a, b and c were asserted above; row0 + rows <= m.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.data.as_ptr().add(row0 * a.row_stride),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                beta,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m > ROW_BLOCK && m * k * n >= PARALLEL_WORK {
        c.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(|(bi, chunk)| {
            block(bi * ROW_BLOCK, chunk.len() / n, chunk);
        });
    } else {
        block(0, m, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for l in 0..a.cols() {
                    s += a.get(i, l) * b.get(l, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn test_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut state = seed;
        let data = (0..rows * cols)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn products_match_naive_loops() {
        let a = test_matrix(7, 5, 1);
        let b = test_matrix(5, 3, 2);
        let expected = naive_matmul(&a, &b);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&expected).unwrap() < 1e-12);
        let at = a.transpose();
        assert!(at.matmul_tn(&b).unwrap().max_abs_diff(&expected).unwrap() < 1e-12);
        let bt = b.transpose();
        assert!(a.matmul_nt(&bt).unwrap().max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn blocked_parallel_product_matches_naive() {
        let a = test_matrix(300, 40, 3);
        let b = test_matrix(40, 30, 4);
        let expected = naive_matmul(&a, &b);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&expected).unwrap() < 1e-11);
    }

    #[test]
    fn shape_errors() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape(_))));
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn logsumexp_is_stable() {
        let big = [1e300, 1e300 - 1.0, -1e300];
        assert_eq!(logsumexp(&big), 1e300);
        let xs = [-10.0, -3.5, 0.0, 2.25, 10.0];
        let direct: f64 = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(&xs) - direct).abs() < 1e-12);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn logsumexp_rows_and_cols_agree_with_transpose() {
        let m = test_matrix(4, 6, 9).scale(20.0);
        let cols = m.logsumexp_cols();
        let rows_t = m.transpose().logsumexp_rows();
        for (a, b) in cols.iter().zip(&rows_t) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reductions() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(m.row_sums(), vec![3.0, 7.0]);
        assert_eq!(m.col_sums(), vec![4.0, 6.0]);
        assert_eq!(m.col_means(), vec![2.0, 3.0]);
        assert_eq!(m.trace(), 5.0);
        assert_eq!(m.transpose().get(0, 1), 3.0);
        assert!(m.check_finite("m").is_ok());
        let bad = Matrix::from_rows(&[[1.0, f64::NAN]]).unwrap();
        assert!(matches!(bad.check_finite("bad"), Err(Error::NonFinite { index: 1, .. })));
    }
}
