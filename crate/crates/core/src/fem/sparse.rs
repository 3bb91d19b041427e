//! Compressed sparse row matrices.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Triplet accumulator; duplicates are summed on conversion.
#[derive(Clone, Debug, Default)]
pub struct Triplets {
  pub n_rows: usize,
  pub n_cols: usize,
  pub entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
  pub fn new(n_rows: usize, n_cols: usize) -> Self {
    Self { n_rows, n_cols, entries: Vec::new() }
  }

  #[inline]
  pub fn push(&mut self, i: usize, j: usize, v: f64) {
    debug_assert!(i < self.n_rows && j < self.n_cols);
    self.entries.push((i, j, v));
  }

  /// Adds a whole matrix shifted by `(r0, c0)`, scaled by `a`.
  pub fn push_block(&mut self, r0: usize, c0: usize, a: f64, m: &SparseMatrix) {
    for i in 0..m.n_rows {
      for k in m.row_ptr[i]..m.row_ptr[i + 1] {
        self.push(r0 + i, c0 + m.col_idx[k], a * m.vals[k]);
      }
    }
  }

  pub fn to_csr(mut self) -> SparseMatrix {
    self.entries.sort_unstable_by_key(|e| (e.0, e.1));
    let mut row_ptr = vec![0usize; self.n_rows + 1];
    let mut col_idx = Vec::with_capacity(self.entries.len());
    let mut vals: Vec<f64> = Vec::with_capacity(self.entries.len());
    let mut last: Option<(usize, usize)> = None;
    for (i, j, v) in self.entries {
      if last == Some((i, j)) {
        *vals.last_mut().unwrap() += v;
      } else {
        col_idx.push(j);
        vals.push(v);
        row_ptr[i + 1] += 1;
        last = Some((i, j));
      }
    }
    for i in 0..self.n_rows {
      row_ptr[i + 1] += row_ptr[i];
    }
    SparseMatrix { n_rows: self.n_rows, n_cols: self.n_cols, row_ptr, col_idx, vals }
  }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
  pub n_rows: usize,
  pub n_cols: usize,
  pub row_ptr: Vec<usize>,
  pub col_idx: Vec<usize>,
  pub vals: Vec<f64>,
}

impl SparseMatrix {
  pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
    Triplets::new(n_rows, n_cols).to_csr()
  }

  pub fn identity(n: usize) -> Self {
    let mut t = Triplets::new(n, n);
    for i in 0..n {
      t.push(i, i, 1.0);
    }
    t.to_csr()
  }

  pub fn nnz(&self) -> usize {
    self.vals.len()
  }

  pub fn get(&self, i: usize, j: usize) -> f64 {
    let r = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
    match r.binary_search(&j) {
      Ok(k) => self.vals[self.row_ptr[i] + k],
      Err(_) => 0.0,
    }
  }

  pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), self.n_cols);
    let mut y = vec![0.0; self.n_rows];
    for (i, yi) in y.iter_mut().enumerate() {
      let mut s = 0.0;
      for k in self.row_ptr[i]..self.row_ptr[i + 1] {
        s += self.vals[k] * x[self.col_idx[k]];
      }
      *yi = s;
    }
    y
  }

  /// `x^T A y`.
  pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
    self.mul_vec(y).iter().zip(x).map(|(a, b)| a * b).sum()
  }

  pub fn transpose(&self) -> Self {
    let mut t = Triplets::new(self.n_cols, self.n_rows);
    for i in 0..self.n_rows {
      for k in self.row_ptr[i]..self.row_ptr[i + 1] {
        t.push(self.col_idx[k], i, self.vals[k]);
      }
    }
    t.to_csr()
  }

  pub fn max_abs(&self) -> f64 {
    self.vals.iter().fold(0.0, |m, v| m.max(v.abs()))
  }

  /// Largest `|A_ij − A_ji|` relative to `max |A|`.
  pub fn asymmetry(&self) -> f64 {
    if self.n_rows != self.n_cols {
      return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for i in 0..self.n_rows {
      for k in self.row_ptr[i]..self.row_ptr[i + 1] {
        let j = self.col_idx[k];
        worst = worst.max((self.vals[k] - self.get(j, i)).abs());
      }
    }
    let scale = self.max_abs();
    if scale == 0.0 {
      0.0
    } else {
      worst / scale
    }
  }

  pub fn is_symmetric(&self, rel_tol: f64) -> bool {
    self.asymmetry() <= rel_tol
  }

  /// Dense copy, for small matrices and tests.
  pub fn to_dense(&self) -> Vec<Vec<f64>> {
    let mut d = vec![vec![0.0; self.n_cols]; self.n_rows];
    for (i, row) in d.iter_mut().enumerate() {
      for k in self.row_ptr[i]..self.row_ptr[i + 1] {
        row[self.col_idx[k]] += self.vals[k];
      }
    }
    d
  }

  /// Assembles a block matrix from `(block_row, block_col, scale, block)` entries; missing blocks are zero.
  pub fn from_blocks(rows: &[usize], cols: &[usize], blocks: &[(usize, usize, f64, &SparseMatrix)]) -> Self {
    let r0: Vec<usize> = offsets(rows);
    let c0: Vec<usize> = offsets(cols);
    let mut t = Triplets::new(rows.iter().sum(), cols.iter().sum());
    for &(bi, bj, a, m) in blocks {
      assert_eq!(m.n_rows, rows[bi]);
      assert_eq!(m.n_cols, cols[bj]);
      t.push_block(r0[bi], c0[bj], a, m);
    }
    t.to_csr()
  }
}

fn offsets(sizes: &[usize]) -> Vec<usize> {
  let mut o = Vec::with_capacity(sizes.len());
  let mut s = 0;
  for &n in sizes {
    o.push(s);
    s += n;
  }
  o
}
