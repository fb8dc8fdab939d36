//! Compressed sparse row storage and the operator trait used by the solvers.

use rayon::prelude::*;
use std::fmt::Write as _;

/// Anything that can be applied to a vector.
pub trait LinearOperator: Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `y = A x`.
    fn apply(&self, x: &[f64], y: &mut [f64]);

    fn apply_alloc(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows()];
        self.apply(x, &mut y);
        y
    }
}

/// Row-compressed sparse matrix with sorted, duplicate-free column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Coordinate-format accumulator. Duplicates are summed on conversion.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self { nrows, ncols, entries: Vec::with_capacity(cap) }
    }

    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.nrows && j < self.ncols);
        self.entries.push((i, j, v));
    }

    pub fn extend(&mut self, other: TripletBuilder) {
        self.entries.extend(other.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorts by (row, col) and sums duplicates. Summation order follows the
    /// stable sort, so the result does not depend on how the triplets were
    /// split across threads as long as each chunk is appended in order.
    pub fn build(mut self) -> CsrMatrix {
        self.entries.par_sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut col_idx = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for &(i, j, v) in &self.entries {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..self.nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { nrows: self.nrows, ncols: self.ncols, row_ptr, col_idx, values }
    }
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, row_ptr: vec![0; nrows + 1], col_idx: vec![], values: vec![] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        let n = d.len();
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: d.to_vec(),
        }
    }

    /// Builds from a dense row-major matrix, dropping exact zeros.
    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut t = TripletBuilder::new(nrows, ncols);
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                if v != 0.0 {
                    t.push(i, j, v);
                }
            }
        }
        t.build()
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

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut t = TripletBuilder::with_capacity(self.ncols, self.nrows, self.nnz());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                t.push(j, i, v);
            }
        }
        t.build()
    }

    pub fn scale(&self, s: f64) -> CsrMatrix {
        let mut m = self.clone();
        m.values.iter_mut().for_each(|v| *v *= s);
        m
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &CsrMatrix, s: f64) -> CsrMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut t = TripletBuilder::with_capacity(self.nrows, self.ncols, self.nnz() + other.nnz());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                t.push(i, j, v);
            }
            for (j, v) in other.row(i) {
                t.push(i, j, s * v);
            }
        }
        t.build()
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.ncols, other.nrows);
        let mut t = TripletBuilder::new(self.nrows, other.ncols);
        let mut acc = vec![0.0; other.ncols];
        let mut mark = vec![usize::MAX; other.ncols];
        let mut cols = Vec::new();
        for i in 0..self.nrows {
            cols.clear();
            for (k, a) in self.row(i) {
                for (j, b) in other.row(k) {
                    if mark[j] != i {
                        mark[j] = i;
                        acc[j] = 0.0;
                        cols.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            cols.sort_unstable();
            for &j in &cols {
                t.push(i, j, acc[j]);
            }
        }
        t.build()
    }

    /// Sequential product; the summation order inside each row is fixed, so
    /// this and [`LinearOperator::apply`] agree bit for bit.
    pub fn mul_vec_serial(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row_dot(i, x);
        }
    }

    #[inline]
    fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()]
            .iter()
            .zip(&self.values[r])
            .map(|(&j, &v)| v * x[j])
            .sum()
    }

    /// Max-norm of `A - A^T` relative to the max-norm of `A`.
    pub fn symmetry_defect(&self) -> f64 {
        if self.nrows != self.ncols {
            return f64::INFINITY;
        }
        let mut d: f64 = 0.0;
        let mut m: f64 = 0.0;
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                m = m.max(v.abs());
                d = d.max((v - self.get(j, i)).abs());
            }
        }
        if m == 0.0 {
            0.0
        } else {
            d / m
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Extracts `A[rows, cols]` for index lists (each strictly increasing
    /// or arbitrary; the map is built explicitly).
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> CsrMatrix {
        let mut cmap = vec![usize::MAX; self.ncols];
        for (k, &c) in cols.iter().enumerate() {
            cmap[c] = k;
        }
        let mut t = TripletBuilder::new(rows.len(), cols.len());
        for (ri, &r) in rows.iter().enumerate() {
            for (j, v) in self.row(r) {
                if cmap[j] != usize::MAX {
                    t.push(ri, cmap[j], v);
                }
            }
        }
        t.build()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }

    /// Coordinate text export: one `row col value` line per stored entry,
    /// values with 17 significant digits.
    pub fn to_coordinate_text(&self) -> String {
        let mut s = String::with_capacity(self.nnz() * 32);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                let _ = writeln!(s, "{} {} {:.16e}", i, j, v);
            }
        }
        s
    }

    pub fn from_coordinate_text(text: &str, nrows: usize, ncols: usize) -> Option<CsrMatrix> {
        let mut t = TripletBuilder::new(nrows, ncols);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut it = line.split_whitespace();
            let i: usize = it.next()?.parse().ok()?;
            let j: usize = it.next()?.parse().ok()?;
            let v: f64 = it.next()?.parse().ok()?;
            if i >= nrows || j >= ncols {
                return None;
            }
            t.push(i, j, v);
        }
        Some(t.build())
    }
}

impl LinearOperator for CsrMatrix {
    fn nrows(&self) -> usize {
        self.nrows
    }
    fn ncols(&self) -> usize {
        self.ncols
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        if self.nrows < 4096 {
            self.mul_vec_serial(x, y);
        } else {
            // each row is reduced in a fixed order, so results are
            // independent of the thread schedule
            y.par_chunks_mut(1024).enumerate().for_each(|(c, chunk)| {
                for (k, yi) in chunk.iter_mut().enumerate() {
                    *yi = self.row_dot(c * 1024 + k, x);
                }
            });
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += s * x`.
pub fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += s * xi);
}
