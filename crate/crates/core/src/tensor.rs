//! Dense row-major matrices and the handful of linear-algebra routines the
//! merging pipeline needs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Default relative cutoff for singular values in [`pseudo_inverse`].
pub const PINV_RTOL: f64 = 1e-10;

// below this many multiply-adds a product is not worth splitting across threads
const PAR_MATMUL_WORK: usize = 1 << 15;

/// Dense real matrix stored row-major in 64-bit floats.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::validation(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::validation("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::validation(format!("{what} contains non-finite values")))
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add", self.shape(), other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// `wa * self + wb * other`, entrywise.
    pub fn lerp(&self, other: &Matrix, wa: f64, wb: f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape("lerp", self.shape(), other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| wa * a + wb * b)
                .collect(),
        })
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row slice out of range");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols, "column slice out of range");
        Matrix::from_fn(self.rows, end - start, |r, c| self.get(r, start + c))
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape("vstack", self.shape(), other.shape()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Places `other` to the right of `self`.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape("hstack", self.shape(), other.shape()));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Matrix-vector product `self · v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::shape("mul_vec", self.shape(), (v.len(), 1)));
        }
        Ok((0..self.rows)
            .map(|r| {
                let mut acc = 0.0;
                for (a, b) in self.row(r).iter().zip(v) {
                    acc += a * b;
                }
                acc
            })
            .collect())
    }
}

/// Standard matrix product. Each entry accumulates over the inner index in
/// ascending order starting from zero.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    if m == 0 {
        return Ok(out);
    }
    let kernel = |row: usize, dst: &mut [f64]| {
        let arow = a.row(row);
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * m..(p + 1) * m];
            for (d, &bv) in dst.iter_mut().zip(brow) {
                *d += av * bv;
            }
        }
    };
    if n * k * m >= PAR_MATMUL_WORK && n > 1 {
        par::for_each_chunk_mut(&mut out.data, m, kernel);
    } else {
        for (row, dst) in out.data.chunks_mut(m).enumerate() {
            kernel(row, dst);
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_bt", a.shape(), b.shape()));
    }
    let m = b.rows;
    let mut out = Matrix::zeros(a.rows, m);
    if m == 0 {
        return Ok(out);
    }
    let kernel = |row: usize, dst: &mut [f64]| {
        let arow = a.row(row);
        for (j, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(b.row(j)) {
                acc += x * y;
            }
            *d = acc;
        }
    };
    if a.rows * a.cols * m >= PAR_MATMUL_WORK && a.rows > 1 {
        par::for_each_chunk_mut(&mut out.data, m, kernel);
    } else {
        for (row, dst) in out.data.chunks_mut(m).enumerate() {
            kernel(row, dst);
        }
    }
    Ok(out)
}

/// Block-diagonal composition `[[a, 0], [0, b]]`.
pub fn block_diag(a: &Matrix, b: &Matrix) -> Matrix {
    let rows = a.rows + b.rows;
    let cols = a.cols + b.cols;
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..a.rows {
        out.data[r * cols..r * cols + a.cols].copy_from_slice(a.row(r));
    }
    for r in 0..b.rows {
        let start = (a.rows + r) * cols + a.cols;
        out.data[start..start + b.cols].copy_from_slice(b.row(r));
    }
    out
}

/// Moore–Penrose pseudo-inverse via SVD. Singular values at or below
/// `rtol · σ_max` are treated as zero.
pub fn pseudo_inverse(a: &Matrix, rtol: f64) -> Result<Matrix> {
    a.ensure_finite("pseudo_inverse input")?;
    if rtol.is_nan() || rtol <= 0.0 {
        return Err(Error::validation("pseudo_inverse tolerance must be > 0"));
    }
    if a.rows == 0 || a.cols == 0 {
        return Ok(Matrix::zeros(a.cols, a.rows));
    }
    let na = nalgebra::DMatrix::from_row_slice(a.rows, a.cols, &a.data);
    let svd = na.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return Ok(Matrix::zeros(a.cols, a.rows));
    }
    let pinv = svd
        .pseudo_inverse(rtol * smax)
        .map_err(|e| Error::validation(format!("svd failed: {e}")))?;
    let mut out = Matrix::zeros(a.cols, a.rows);
    for r in 0..a.cols {
        for c in 0..a.rows {
            out.data[r * a.rows + c] = pinv[(r, c)];
        }
    }
    Ok(out)
}

/// A bijection on `0..n` stored as an index vector: position `i` maps to
/// `mapping[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexPermutation {
    mapping: Vec<usize>,
}

impl IndexPermutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || seen[m] {
                return Err(Error::validation(format!(
                    "{mapping:?} is not a permutation of 0..{n}"
                )));
            }
            seen[m] = true;
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Self { mapping: inv }
    }

    /// 0/1 matrix with a one at `(i, mapping[i])` for every row `i`.
    pub fn to_matrix(&self) -> Matrix {
        let n = self.mapping.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &j) in self.mapping.iter().enumerate() {
            m.set(i, j, 1.0);
        }
        m
    }

    /// Row `i` of the result is row `mapping[i]` of `m`, i.e. `to_matrix() · m`.
    pub fn apply_rows(&self, m: &Matrix) -> Result<Matrix> {
        if m.rows() != self.len() {
            return Err(Error::shape("apply_rows", (self.len(), self.len()), m.shape()));
        }
        let mut data = Vec::with_capacity(m.data.len());
        for &src in &self.mapping {
            data.extend_from_slice(m.row(src));
        }
        Matrix::new(m.rows(), m.cols(), data)
    }

    /// Column `j` of the result is column `mapping[j]` of `m`, i.e. `m · to_matrix()ᵀ`.
    pub fn apply_cols(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.len() {
            return Err(Error::shape("apply_cols", m.shape(), (self.len(), self.len())));
        }
        Ok(Matrix::from_fn(m.rows(), m.cols(), |r, c| {
            m.get(r, self.mapping[c])
        }))
    }

    pub fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        self.mapping.iter().map(|&src| v[src]).collect()
    }
}
