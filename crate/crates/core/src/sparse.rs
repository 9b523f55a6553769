//! Compressed sparse row storage for kernel matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::par;

/// Real CSR matrix with `u32` column indices and sorted rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from per-row `(column, value)` lists. Each list is
    /// sorted by column here; duplicate columns are not merged.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(u32, f64)>>) -> Self {
        let nrows = rows.len();
        let nnz = rows.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for mut row in rows {
            row.sort_unstable_by_key(|&(c, _)| c);
            for (c, v) in row {
                debug_assert!((c as usize) < ncols);
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Keeps every entry of `dense` whose value is not exactly zero.
    pub fn from_dense(dense: &DMatrix<f64>) -> Self {
        let rows = (0..dense.nrows())
            .map(|i| {
                (0..dense.ncols())
                    .filter(|&j| dense[(i, j)] != 0.0)
                    .map(|j| (j as u32, dense[(i, j)]))
                    .collect()
            })
            .collect();
        Self::from_rows(dense.ncols(), rows)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                out[(i, c as usize)] += v;
            }
        }
        out
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[range.clone()], &self.values[range])
    }

    /// Entry `(i, j)`, zero when outside the pattern.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&(j as u32)) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row_sums(&self) -> Vec<f64> {
        par::map_range(self.nrows, |i| self.row(i).1.iter().sum())
    }

    /// Returns `diag(left) * self * diag(right)`.
    pub fn scaled(&self, left: &[f64], right: &[f64]) -> Self {
        self.clone().into_scaled(left, right)
    }

    /// Consumes the matrix and returns `diag(left) * self * diag(right)`.
    pub fn into_scaled(mut self, left: &[f64], right: &[f64]) -> Self {
        assert_eq!(left.len(), self.nrows);
        assert_eq!(right.len(), self.ncols);
        for i in 0..self.nrows {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                self.values[k] *= left[i] * right[self.col_idx[k] as usize];
            }
        }
        self
    }

    /// Replaces every stored value `v` in row `i`, column `j` by `f(i, j, v)`.
    pub fn map_values(&mut self, f: impl Fn(usize, usize, f64) -> f64 + Sync + Send) {
        let row_ptr = &self.row_ptr;
        let col_idx = &self.col_idx;
        let new_values = par::map_range(self.nrows, |i| {
            (row_ptr[i]..row_ptr[i + 1])
                .map(|k| f(i, col_idx[k] as usize, self.values[k]))
                .collect::<Vec<_>>()
        });
        self.values = new_values.into_iter().flatten().collect();
    }

    /// Drops stored entries for which `keep(value)` is false.
    pub fn retain(&mut self, keep: impl Fn(f64) -> bool) {
        let mut write = 0;
        let mut start = 0;
        for i in 0..self.nrows {
            let end = self.row_ptr[i + 1];
            for k in start..end {
                if keep(self.values[k]) {
                    self.values[write] = self.values[k];
                    self.col_idx[write] = self.col_idx[k];
                    write += 1;
                }
            }
            start = end;
            self.row_ptr[i + 1] = write;
        }
        self.values.truncate(write);
        self.col_idx.truncate(write);
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.col_idx {
            counts[c as usize + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0u32; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                let slot = &mut next[c as usize];
                col_idx[*slot] = i as u32;
                values[*slot] = v;
                *slot += 1;
            }
        }
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Returns `selfᵀ x`, accumulating rows in order.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut out = vec![0.0; self.ncols];
        for (i, xi) in x.iter().enumerate() {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                out[c as usize] += v * xi;
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        par::map_range(self.nrows, |i| {
            let (cols, vals) = self.row(i);
            cols.iter()
                .zip(vals)
                .map(|(&c, &v)| v * x[c as usize])
                .sum()
        })
    }

    /// Multiplies by a row-major `ncols x width` block, returning a row-major
    /// `nrows x width` block.
    pub fn mul_block(&self, x: &[f64], width: usize) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols * width);
        let mut out = vec![0.0; self.nrows * width];
        par::for_each_row_mut(&mut out, width, |i, acc| {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                let src = &x[c as usize * width..(c as usize + 1) * width];
                for (a, s) in acc.iter_mut().zip(src) {
                    *a += v * s;
                }
            }
        });
        out
    }

    /// First `(row, col)` where `|A_ij - A_ji| > tol * max|A|`, if any. A
    /// pattern mismatch counts as a violation when the present entry exceeds
    /// the tolerance.
    pub fn symmetry_violation(&self, tol: f64) -> Option<(usize, usize)> {
        if self.nrows != self.ncols {
            return Some((0, 0));
        }
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let bound = tol * scale;
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                if (v - self.get(c as usize, i)).abs() > bound {
                    return Some((i, c as usize));
                }
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_round_trip_and_products() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0, 0.0, 5.0]);
        let s = CsrMatrix::from_dense(&a);
        assert_eq!(s.nnz(), 5);
        assert_eq!(s.to_dense(), a);
        assert_eq!(s.get(0, 2), 2.0);
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.mul_vec(&[1.0, 1.0, 1.0]), vec![3.0, 3.0, 9.0]);
        // Two columns [1,1,1] and [1,2,3], row-major.
        let y = s.mul_block(&[1.0, 1.0, 1.0, 2.0, 1.0, 3.0], 2);
        assert_eq!(y, vec![3.0, 7.0, 3.0, 6.0, 9.0, 19.0]);
        assert_eq!(s.symmetry_violation(0.0), Some((0, 2)));
    }

    #[test]
    fn scaling_is_diagonal_conjugation() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let s = CsrMatrix::from_dense(&a).scaled(&[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(s.to_dense(), DMatrix::from_row_slice(2, 2, &[3.0, 8.0, 12.0, 8.0]));
        assert!(CsrMatrix::from_dense(&a).symmetry_violation(0.0).is_none());
        let b = CsrMatrix::from_dense(&a).into_scaled(&[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(b, s);
    }

    #[test]
    fn transpose_retain_and_map() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 3.0, 1e-320]);
        let mut s = CsrMatrix::from_dense(&a);
        assert_eq!(s.transpose().to_dense(), a.transpose());
        assert_eq!(s.tr_mul_vec(&[1.0, 2.0]), vec![1.0, 6.0, 2.0 + 2e-320]);
        s.retain(|v| v >= 1e-300);
        assert_eq!(s.nnz(), 3);
        assert_eq!(s.get(1, 2), 0.0);
        s.map_values(|i, j, v| v + (10 * i + j) as f64);
        assert_eq!(s.get(1, 1), 14.0);
        assert_eq!(s.get(0, 2), 4.0);
    }
}
