//! Minimal dense numeric substrate: row-major `f32` matrices, matrix
//! products, elementwise ops, and reductions.
//!
//! Parallelism contract: with the `parallel` feature each kernel splits work
//! by output row, and every output element is accumulated in a fixed order by
//! exactly one task. The parallel and sequential kernels therefore produce
//! bit-identical results for any thread count.

use crate::error::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Dense row-major matrix of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} elements cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Matrix> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch("ragged row lengths".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
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

    /// Gather the given rows into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op,
                lr: self.rows,
                lc: self.cols,
                rr: other.rows,
                rc: other.cols,
            });
        }
        Ok(())
    }

    // ---- matrix products ----

    /// `self (m x k) * other (k x n) -> (m x n)`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                lr: self.rows,
                lc: self.cols,
                rr: other.rows,
                rc: other.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        kernels::matmul(
            &self.data,
            &other.data,
            &mut out.data,
            self.rows,
            self.cols,
            other.cols,
        );
        Ok(out)
    }

    /// `self^T (m x r)^T * other (r x n) -> (m x n)` where `self` is `r x m`.
    pub fn matmul_at(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul_at",
                lr: self.rows,
                lc: self.cols,
                rr: other.rows,
                rc: other.cols,
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        kernels::matmul_at(
            &self.data,
            &other.data,
            &mut out.data,
            self.rows,
            self.cols,
            other.cols,
        );
        Ok(out)
    }

    /// `self (m x k) * other^T (n x k)^T -> (m x n)`.
    pub fn matmul_bt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                op: "matmul_bt",
                lr: self.rows,
                lc: self.cols,
                rr: other.rows,
                rc: other.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        kernels::matmul_bt(
            &self.data,
            &other.data,
            &mut out.data,
            self.rows,
            self.cols,
            other.rows,
        );
        Ok(out)
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn mul_elem(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "mul")?;
        Ok(self.zip(other, |a, b| a * b))
    }

    pub fn div_elem(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "div")?;
        let out = self.zip(other, |a, b| a / b);
        out.refuse_non_finite("div")?;
        Ok(out)
    }

    pub fn max_elem(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "max")?;
        Ok(self.zip(other, f32::max))
    }

    pub fn relu(&self) -> Matrix {
        self.map(|v| v.max(0.0))
    }

    pub fn sqrt_elem(&self) -> Result<Matrix> {
        if self.data.iter().any(|&v| v < 0.0) {
            return Err(Error::DomainError {
                op: "sqrt",
                detail: "negative input".into(),
            });
        }
        Ok(self.map(f32::sqrt))
    }

    pub fn exp_elem(&self) -> Result<Matrix> {
        let out = self.map(f32::exp);
        out.refuse_non_finite("exp")?;
        Ok(out)
    }

    pub fn ln_elem(&self) -> Result<Matrix> {
        if self.data.iter().any(|&v| v <= 0.0) {
            return Err(Error::DomainError {
                op: "log",
                detail: "non-positive input".into(),
            });
        }
        Ok(self.map(f32::ln))
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Matrix, f: impl Fn(f32, f32) -> f32) -> Matrix {
        Matrix {
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

    fn refuse_non_finite(&self, op: &'static str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::DomainError {
                op,
                detail: format!("non-finite result at flat index {pos}"),
            });
        }
        Ok(())
    }

    // ---- row broadcasts (vector length = cols) ----

    fn check_row_vec(&self, v: &[f32], op: &'static str) -> Result<()> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op,
                lr: self.rows,
                lc: self.cols,
                rr: 1,
                rc: v.len(),
            });
        }
        Ok(())
    }

    pub fn row_add(&mut self, v: &[f32]) -> Result<()> {
        self.check_row_vec(v, "row_add")?;
        for row in self.data.chunks_exact_mut(self.cols) {
            for (o, &b) in row.iter_mut().zip(v) {
                *o += b;
            }
        }
        Ok(())
    }

    pub fn row_sub(&mut self, v: &[f32]) -> Result<()> {
        self.check_row_vec(v, "row_sub")?;
        for row in self.data.chunks_exact_mut(self.cols) {
            for (o, &b) in row.iter_mut().zip(v) {
                *o -= b;
            }
        }
        Ok(())
    }

    pub fn row_mul(&mut self, v: &[f32]) -> Result<()> {
        self.check_row_vec(v, "row_mul")?;
        for row in self.data.chunks_exact_mut(self.cols) {
            for (o, &b) in row.iter_mut().zip(v) {
                *o *= b;
            }
        }
        Ok(())
    }

    pub fn row_div(&mut self, v: &[f32]) -> Result<()> {
        self.check_row_vec(v, "row_div")?;
        if v.contains(&0.0) {
            return Err(Error::DomainError {
                op: "row_div",
                detail: "division by zero".into(),
            });
        }
        for row in self.data.chunks_exact_mut(self.cols) {
            for (o, &b) in row.iter_mut().zip(v) {
                *o /= b;
            }
        }
        Ok(())
    }

    // ---- reductions ----
    // Accumulation order is row-ascending (per column) or column-ascending
    // (per row), matching a plain scalar loop exactly.

    /// Per-column sum over all rows.
    pub fn col_sum(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.cols];
        for row in self.data.chunks_exact(self.cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Per-column mean over all rows.
    pub fn col_mean(&self) -> Vec<f32> {
        let n = self.rows.max(1) as f32;
        let mut out = self.col_sum();
        for v in &mut out {
            *v /= n;
        }
        out
    }

    /// Per-column biased (population) variance, as batch normalization needs.
    pub fn col_var_biased(&self) -> Vec<f32> {
        let mean = self.col_mean();
        let n = self.rows.max(1) as f32;
        let mut out = vec![0.0f32; self.cols];
        for row in self.data.chunks_exact(self.cols) {
            for ((o, &v), &m) in out.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *o += d * d;
            }
        }
        for v in &mut out {
            *v /= n;
        }
        out
    }

    /// Per-column maximum.
    pub fn col_max(&self) -> Vec<f32> {
        let mut out = vec![f32::NEG_INFINITY; self.cols];
        for row in self.data.chunks_exact(self.cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                if v > *o {
                    *o = v;
                }
            }
        }
        out
    }

    /// Per-row sum.
    pub fn row_sum(&self) -> Vec<f32> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| {
                let mut acc = 0.0f32;
                for &v in row {
                    acc += v;
                }
                acc
            })
            .collect()
    }

    /// Per-row maximum.
    pub fn row_max(&self) -> Vec<f32> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| {
                let mut best = f32::NEG_INFINITY;
                for &v in row {
                    if v > best {
                        best = v;
                    }
                }
                best
            })
            .collect()
    }

    /// Per-row argmax; ties break toward the lowest index.
    pub fn row_argmax(&self) -> Vec<usize> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| {
                let mut best = 0usize;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Raw matrix-product kernels.
///
/// The `*_seq` functions are the reference sequential implementations; they
/// are what the public ops run when the `parallel` feature is disabled, and
/// what the benchmarks compare the rayon path against. Every output element
/// is accumulated in ascending inner-index order (the dot-product kernel uses
/// a fixed 8-lane scheme), so results never depend on scheduling.
pub mod kernels {
    /// Work threshold below which the rayon path is not worth spawning.
    #[cfg(feature = "parallel")]
    const PAR_MIN_WORK: usize = 1 << 16;

    fn matmul_row(out_row: &mut [f32], a_row: &[f32], b: &[f32], n: usize) {
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..kk * n + n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }

    fn matmul_at_row(out_row: &mut [f32], i: usize, a: &[f32], b: &[f32], m: usize, n: usize) {
        let r = a.len() / m;
        for rr in 0..r {
            let coef = a[rr * m + i];
            let b_row = &b[rr * n..rr * n + n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += coef * bv;
            }
        }
    }

    /// Dot product with a fixed 8-lane accumulation order.
    pub fn dot(a: &[f32], b: &[f32]) -> f32 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [0.0f32; 8];
        let chunks = a.len() / 8;
        for c in 0..chunks {
            let i = c * 8;
            for l in 0..8 {
                acc[l] += a[i + l] * b[i + l];
            }
        }
        let mut tail = 0.0f32;
        for i in chunks * 8..a.len() {
            tail += a[i] * b[i];
        }
        let s01 = acc[0] + acc[1];
        let s23 = acc[2] + acc[3];
        let s45 = acc[4] + acc[5];
        let s67 = acc[6] + acc[7];
        ((s01 + s23) + (s45 + s67)) + tail
    }

    pub fn matmul_seq(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
            matmul_row(out_row, &a[i * k..(i + 1) * k], b, n);
        }
    }

    pub fn matmul_at_seq(a: &[f32], b: &[f32], out: &mut [f32], r: usize, m: usize, n: usize) {
        debug_assert_eq!(a.len(), r * m);
        debug_assert_eq!(b.len(), r * n);
        for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
            matmul_at_row(out_row, i, a, b, m, n);
        }
    }

    pub fn matmul_bt_seq(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
            let a_row = &a[i * k..(i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a_row, &b[j * k..(j + 1) * k]);
            }
        }
    }

    #[cfg(feature = "parallel")]
    pub fn matmul_par(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
        use rayon::prelude::*;
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        out.par_chunks_exact_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| matmul_row(out_row, &a[i * k..(i + 1) * k], b, n));
    }

    #[cfg(feature = "parallel")]
    pub fn matmul_at_par(a: &[f32], b: &[f32], out: &mut [f32], r: usize, m: usize, n: usize) {
        use rayon::prelude::*;
        debug_assert_eq!(a.len(), r * m);
        debug_assert_eq!(b.len(), r * n);
        out.par_chunks_exact_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| matmul_at_row(out_row, i, a, b, m, n));
    }

    #[cfg(feature = "parallel")]
    pub fn matmul_bt_par(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
        use rayon::prelude::*;
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        out.par_chunks_exact_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| {
                let a_row = &a[i * k..(i + 1) * k];
                for (j, o) in out_row.iter_mut().enumerate() {
                    *o = dot(a_row, &b[j * k..(j + 1) * k]);
                }
            });
    }

    pub(super) fn matmul(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
        #[cfg(feature = "parallel")]
        if m * k * n >= PAR_MIN_WORK {
            return matmul_par(a, b, out, m, k, n);
        }
        matmul_seq(a, b, out, m, k, n);
    }

    pub(super) fn matmul_at(a: &[f32], b: &[f32], out: &mut [f32], r: usize, m: usize, n: usize) {
        #[cfg(feature = "parallel")]
        if r * m * n >= PAR_MIN_WORK {
            return matmul_at_par(a, b, out, r, m, n);
        }
        matmul_at_seq(a, b, out, r, m, n);
    }

    pub(super) fn matmul_bt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
        #[cfg(feature = "parallel")]
        if m * k * n >= PAR_MIN_WORK {
            return matmul_bt_par(a, b, out, m, k, n);
        }
        matmul_bt_seq(a, b, out, m, k, n);
    }
}

// Re-export so model code can parallelize its own batch loops without caring
// about the feature flag.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_row_par<F: Fn(usize, &mut [f32]) + Sync>(
    data: &mut [f32],
    cols: usize,
    f: F,
) {
    data.par_chunks_exact_mut(cols)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_row_par<F: Fn(usize, &mut [f32]) + Sync>(
    data: &mut [f32],
    cols: usize,
    f: F,
) {
    for (i, row) in data.chunks_exact_mut(cols).enumerate() {
        f(i, row);
    }
}
