//! Row-compressed sparse matrices and small vector helpers.
//!
//! Matrices are immutable after assembly: build with [`SparseMatrix::from_triplets`],
//! which accumulates duplicate entries, sorts columns within each row and drops
//! magnitudes below [`DROP_TOL`].

use crate::error::{Error, Result};
use std::io::{BufRead, Write};

/// Entries with |value| below this are not stored.
pub const DROP_TOL: f64 = 1e-15;

pub type Vector = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from (row, col, value) triplets. Duplicates are summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_rows];
        for (i, j, v) in triplets {
            if i >= n_rows {
                return Err(Error::OutOfRange {
                    what: "row index",
                    got: i,
                    limit: n_rows,
                });
            }
            if j >= n_cols {
                return Err(Error::OutOfRange {
                    what: "column index",
                    got: j,
                    limit: n_cols,
                });
            }
            if !v.is_finite() {
                return Err(Error::InvalidMatrix(format!(
                    "non-finite entry at ({i}, {j})"
                )));
            }
            per_row[i].push((j, v));
        }
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for entries in per_row.iter_mut() {
            entries.sort_by_key(|&(j, _)| j);
            let mut k = 0;
            while k < entries.len() {
                let j = entries[k].0;
                let mut v = 0.0;
                while k < entries.len() && entries[k].0 == j {
                    v += entries[k].1;
                    k += 1;
                }
                if v.abs() >= DROP_TOL {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(SparseMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Entries (column, value) of row `i`, columns ascending.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vector {
        assert_eq!(x.len(), self.n_cols, "dimension mismatch in mul_vec");
        let mut y = vec![0.0; self.n_rows];
        for i in 0..self.n_rows {
            let mut acc = 0.0;
            for (j, v) in self.row(i) {
                acc += v * x[j];
            }
            y[i] = acc;
        }
        y
    }

    /// y = Aᵀ x without forming the transpose.
    pub fn transpose_mul_vec(&self, x: &[f64]) -> Vector {
        assert_eq!(x.len(), self.n_rows, "dimension mismatch in transpose_mul_vec");
        let mut y = vec![0.0; self.n_cols];
        for i in 0..self.n_rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for (j, v) in self.row(i) {
                y[j] += v * xi;
            }
        }
        y
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.n_cols];
        for &j in &self.col_idx {
            counts[j] += 1;
        }
        let mut row_ptr = Vec::with_capacity(self.n_cols + 1);
        row_ptr.push(0);
        for c in &counts {
            let last = *row_ptr.last().unwrap();
            row_ptr.push(last + c);
        }
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        let mut next = row_ptr[..self.n_cols].to_vec();
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                let pos = next[j];
                col_idx[pos] = i;
                values[pos] = v;
                next[j] += 1;
            }
        }
        SparseMatrix {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Sparse product self · other.
    pub fn matmul(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.n_cols != other.n_rows {
            return Err(Error::InvalidMatrix(format!(
                "cannot multiply {}x{} by {}x{}",
                self.n_rows, self.n_cols, other.n_rows, other.n_cols
            )));
        }
        let mut scratch = vec![0.0; other.n_cols];
        let mut touched: Vec<usize> = Vec::new();
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..self.n_rows {
            for (k, a) in self.row(i) {
                for (j, b) in other.row(k) {
                    if scratch[j] == 0.0 && !touched.contains(&j) {
                        touched.push(j);
                    }
                    scratch[j] += a * b;
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                triplets.push((i, j, scratch[j]));
                scratch[j] = 0.0;
            }
            touched.clear();
        }
        SparseMatrix::from_triplets(self.n_rows, other.n_cols, triplets)
    }

    pub fn add(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.n_rows != other.n_rows || self.n_cols != other.n_cols {
            return Err(Error::InvalidMatrix("shape mismatch in add".into()));
        }
        let mut triplets = Vec::with_capacity(self.nnz() + other.nnz());
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                triplets.push((i, j, v));
            }
            for (j, v) in other.row(i) {
                triplets.push((i, j, v));
            }
        }
        SparseMatrix::from_triplets(self.n_rows, self.n_cols, triplets)
    }

    pub fn scale(&self, s: f64) -> SparseMatrix {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= s;
        }
        out
    }

    pub fn row_sums(&self) -> Vector {
        (0..self.n_rows)
            .map(|i| self.row(i).map(|(_, v)| v).sum())
            .collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.n_rows != self.n_cols {
            return false;
        }
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                if (v - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.n_cols]; self.n_rows];
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                dense[i][j] = v;
            }
        }
        dense
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Plain-text export: `rows cols nnz` header, one `i j v` triple per line.
    pub fn write_text(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{} {} {}", self.n_rows, self.n_cols, self.nnz())?;
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                writeln!(w, "{} {} {:.16e}", i, j, v)?;
            }
        }
        Ok(())
    }

    pub fn read_text(r: &mut impl BufRead) -> Result<SparseMatrix> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty matrix file"))??;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::parse(1, "bad header")))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::parse(1, "header must be `rows cols nnz`"));
        }
        let (rows, cols, nnz) = (dims[0], dims[1], dims[2]);
        let mut triplets = Vec::with_capacity(nnz);
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = k + 2;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 3 {
                return Err(Error::parse(lineno, "expected `i j v`"));
            }
            let i: usize = toks[0]
                .parse()
                .map_err(|_| Error::parse(lineno, "bad row index"))?;
            let j: usize = toks[1]
                .parse()
                .map_err(|_| Error::parse(lineno, "bad column index"))?;
            let v: f64 = toks[2]
                .parse()
                .map_err(|_| Error::parse(lineno, "bad value"))?;
            triplets.push((i, j, v));
        }
        if triplets.len() != nnz {
            return Err(Error::parse(
                1,
                format!("header claims {} entries, file has {}", nnz, triplets.len()),
            ));
        }
        SparseMatrix::from_triplets(rows, cols, triplets)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Dense symmetric positive definite factorization A = L·Lᵀ.
#[derive(Debug, Clone)]
pub struct DenseCholesky {
    n: usize,
    l: Vec<f64>, // row-major lower triangle, full n×n storage
}

impl DenseCholesky {
    pub fn factor(a: &SparseMatrix) -> Result<DenseCholesky> {
        if a.n_rows() != a.n_cols() {
            return Err(Error::InvalidMatrix("cholesky needs a square matrix".into()));
        }
        let n = a.n_rows();
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    l[i * n + j] = v;
                }
            }
        }
        for k in 0..n {
            let mut d = l[k * n + k];
            for p in 0..k {
                d -= l[k * n + p] * l[k * n + p];
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::SolverFailure(format!(
                    "matrix not positive definite at pivot {k}"
                )));
            }
            let d = d.sqrt();
            l[k * n + k] = d;
            for i in (k + 1)..n {
                let mut s = l[i * n + k];
                for p in 0..k {
                    s -= l[i * n + p] * l[k * n + p];
                }
                l[i * n + k] = s / d;
            }
        }
        Ok(DenseCholesky { n, l })
    }

    pub fn solve(&self, b: &[f64]) -> Vector {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for p in 0..i {
                s -= self.l[i * n + p] * y[p];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for p in (i + 1)..n {
                s -= self.l[p * n + i] * y[p];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }
}
