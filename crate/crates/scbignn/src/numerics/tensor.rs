//! Dense row-major matrix used for all model math.

use super::Scalar;
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Rows below this run matmuls sequentially; the per-cell gene matrices are
/// small enough that thread dispatch would dominate.
const PAR_ROW_THRESHOLD: usize = 256;

/// Dense 2-D tensor, row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor2<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    /// Takes ownership of a row-major buffer; length must be `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length != rows*cols");
        Tensor2 { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor2 { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[S]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn rows_mut(&mut self) -> impl Iterator<Item = &mut [S]> {
        self.data.chunks_exact_mut(self.cols)
    }

    pub fn transpose(&self) -> Tensor2<S> {
        Tensor2::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(S) -> S + Sync) -> Tensor2<S> {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &Tensor2<S>, alpha: S) {
        assert_eq!(self.data.len(), other.data.len(), "add_scaled shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: S) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn col_sums(&self) -> Vec<S> {
        let mut out = vec![S::zero(); self.cols];
        for row in self.rows_iter() {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn as_f64(&self) -> Tensor2<f64> {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor2<T> {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    /// `self · other` — (m×k)(k×n). Output rows are independent, so the
    /// parallel path is bit-identical to the sequential one.
    pub fn matmul(&self, other: &Tensor2<S>) -> Tensor2<S> {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} · {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Tensor2::zeros(self.rows, other.cols);
        let n = other.cols;
        let kdim = self.cols;
        let body = |(i, orow): (usize, &mut [S])| {
            let arow = &self.data[i * kdim..(i + 1) * kdim];
            for (k, &a) in arow.iter().enumerate() {
                if a != S::zero() {
                    let brow = &other.data[k * n..(k + 1) * n];
                    for (o, &b) in orow.iter_mut().zip(brow) {
                        *o += a * b;
                    }
                }
            }
        };
        if self.rows >= PAR_ROW_THRESHOLD {
            out.data.par_chunks_mut(n).enumerate().for_each(body);
        } else {
            out.data.chunks_mut(n).enumerate().for_each(body);
        }
        out
    }

    /// `self · otherᵀ` — (m×k)(n×k)ᵀ. Computed as row-dot-row.
    pub fn matmul_transpose_rhs(&self, other: &Tensor2<S>) -> Tensor2<S> {
        assert_eq!(
            self.cols, other.cols,
            "matmul_transpose_rhs: {}x{} · ({}x{})^T",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Tensor2::zeros(self.rows, other.rows);
        let n = other.rows;
        let kdim = self.cols;
        let body = |(i, orow): (usize, &mut [S])| {
            let arow = &self.data[i * kdim..(i + 1) * kdim];
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = &other.data[j * kdim..(j + 1) * kdim];
                let mut acc = S::zero();
                for (&a, &b) in arow.iter().zip(brow) {
                    acc += a * b;
                }
                *o = acc;
            }
        };
        if self.rows >= PAR_ROW_THRESHOLD {
            out.data.par_chunks_mut(n).enumerate().for_each(body);
        } else {
            out.data.chunks_mut(n).enumerate().for_each(body);
        }
        out
    }

    /// `selfᵀ · other` — (k×m)ᵀ(k×n). Used for weight gradients.
    pub fn transposed_matmul(&self, other: &Tensor2<S>) -> Tensor2<S> {
        assert_eq!(
            self.rows, other.rows,
            "transposed_matmul: ({}x{})^T · {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let m = self.cols;
        let n = other.cols;
        let mut out = Tensor2::zeros(m, n);
        if m >= PAR_ROW_THRESHOLD {
            out.data.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
                for k in 0..self.rows {
                    let a = self.data[k * m + i];
                    if a != S::zero() {
                        let brow = &other.data[k * n..(k + 1) * n];
                        for (o, &b) in orow.iter_mut().zip(brow) {
                            *o += a * b;
                        }
                    }
                }
            });
        } else {
            for k in 0..self.rows {
                let arow = &self.data[k * m..(k + 1) * m];
                let brow = &other.data[k * n..(k + 1) * n];
                for (i, &a) in arow.iter().enumerate() {
                    if a != S::zero() {
                        let orow = &mut out.data[i * n..(i + 1) * n];
                        for (o, &b) in orow.iter_mut().zip(brow) {
                            *o += a * b;
                        }
                    }
                }
            }
        }
        out
    }

    /// Copies columns `lo..hi` into a new tensor (multi-head split).
    pub fn columns(&self, lo: usize, hi: usize) -> Tensor2<S> {
        assert!(lo <= hi && hi <= self.cols, "column range");
        let mut out = Tensor2::zeros(self.rows, hi - lo);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[lo..hi]);
        }
        out
    }

    /// Writes `src` into columns starting at `lo` (multi-head concat).
    pub fn set_columns(&mut self, lo: usize, src: &Tensor2<S>) {
        assert_eq!(self.rows, src.rows, "set_columns rows");
        assert!(lo + src.cols <= self.cols, "set_columns range");
        for r in 0..self.rows {
            let dst = &mut self.row_mut(r)[lo..lo + src.cols];
            dst.copy_from_slice(src.row(r));
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_broadcast(&mut self, bias: &[S]) {
        assert_eq!(bias.len(), self.cols, "bias width");
        for row in self.rows_mut() {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }
}
