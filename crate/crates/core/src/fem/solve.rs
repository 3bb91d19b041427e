//! Direct solution of sparse systems: equilibration, reverse Cuthill–McKee
//! ordering and banded LU with partial pivoting.
//!
//! Known nullspaces are handled by pinning one unknown per basis vector and
//! projecting the result; this needs the nullspace to be a left nullspace too,
//! which holds for the symmetric operators used here.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use super::sparse::{SparseMatrix, Triplets};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolveError {
  #[error("matrix is not square ({rows}x{cols})")]
  NotSquare { rows: usize, cols: usize },
  #[error("singular matrix: pivot {pivot:e} at step {step}")]
  SingularMatrix { step: usize, pivot: f64 },
  #[error("right-hand side not orthogonal to the nullspace (component {component:e})")]
  IncompatibleRhs { component: f64 },
  #[error("relative residual {residual:e} above tolerance")]
  Inaccurate { residual: f64 },
}

/// Relative residual accepted by [`LuFactor::solve`].
pub const RESIDUAL_TOL: f64 = 1e-10;
const PIVOT_TOL: f64 = 1e-13;
const COMPAT_TOL: f64 = 1e-8;

/// Reusable factorization of a square sparse matrix.
#[derive(Clone, Debug)]
pub struct LuFactor {
  n: usize,
  /// `perm[new] = old`.
  perm: Vec<usize>,
  kl: usize,
  ku: usize,
  width: usize,
  band: Vec<f64>,
  piv: Vec<usize>,
  row_scale: Vec<f64>,
  col_scale: Vec<f64>,
  pinned: Vec<usize>,
  nullspace: Vec<Vec<f64>>,
  a: SparseMatrix,
  a_pinned: SparseMatrix,
}

impl LuFactor {
  pub fn new(a: &SparseMatrix, nullspace: &[Vec<f64>]) -> Result<Self, SolveError> {
    if a.n_rows != a.n_cols {
      return Err(SolveError::NotSquare { rows: a.n_rows, cols: a.n_cols });
    }
    let n = a.n_rows;
    let basis = orthonormalize(nullspace);
    let pinned = pin_indices(&basis, n);
    let mut is_pinned = vec![false; n];
    for &p in &pinned {
      is_pinned[p] = true;
    }
    let mut t = Triplets::new(n, n);
    for i in 0..n {
      if is_pinned[i] {
        t.push(i, i, 1.0);
        continue;
      }
      for k in a.row_ptr[i]..a.row_ptr[i + 1] {
        let j = a.col_idx[k];
        if !is_pinned[j] {
          t.push(i, j, a.vals[k]);
        }
      }
    }
    let a_pinned = t.to_csr();

    let mut col_scale = vec![0.0f64; n];
    for i in 0..n {
      for k in a_pinned.row_ptr[i]..a_pinned.row_ptr[i + 1] {
        let j = a_pinned.col_idx[k];
        col_scale[j] = col_scale[j].max(a_pinned.vals[k].abs());
      }
    }
    for (j, c) in col_scale.iter_mut().enumerate() {
      if *c == 0.0 {
        return Err(SolveError::SingularMatrix { step: j, pivot: 0.0 });
      }
      *c = 1.0 / *c;
    }
    let mut row_scale = vec![0.0f64; n];
    for i in 0..n {
      for k in a_pinned.row_ptr[i]..a_pinned.row_ptr[i + 1] {
        row_scale[i] = row_scale[i].max((a_pinned.vals[k] * col_scale[a_pinned.col_idx[k]]).abs());
      }
      if row_scale[i] == 0.0 {
        return Err(SolveError::SingularMatrix { step: i, pivot: 0.0 });
      }
      row_scale[i] = 1.0 / row_scale[i];
    }

    let perm = rcm_order(&a_pinned);
    let mut inv = vec![0usize; n];
    for (new, &old) in perm.iter().enumerate() {
      inv[old] = new;
    }
    let (mut kl, mut ku) = (0usize, 0usize);
    for i in 0..n {
      for k in a_pinned.row_ptr[i]..a_pinned.row_ptr[i + 1] {
        let (r, c) = (inv[i], inv[a_pinned.col_idx[k]]);
        if r > c {
          kl = kl.max(r - c);
        } else {
          ku = ku.max(c - r);
        }
      }
    }
    let width = 2 * kl + ku + 1;
    let mut band = vec![0.0; n * width];
    for i in 0..n {
      let r = inv[i];
      for k in a_pinned.row_ptr[i]..a_pinned.row_ptr[i + 1] {
        let j = a_pinned.col_idx[k];
        let c = inv[j];
        band[r * width + c + kl - r] += a_pinned.vals[k] * row_scale[i] * col_scale[j];
      }
    }
    let mut lu = Self {
      n,
      perm,
      kl,
      ku,
      width,
      band,
      piv: vec![0; n],
      row_scale,
      col_scale,
      pinned,
      nullspace: basis,
      a: a.clone(),
      a_pinned,
    };
    lu.factor()?;
    Ok(lu)
  }

  fn factor(&mut self) -> Result<(), SolveError> {
    let (n, kl, ku, w) = (self.n, self.kl, self.ku, self.width);
    for k in 0..n {
      let last_row = (k + kl).min(n - 1);
      let last_col = (k + ku + kl).min(n - 1);
      let mut p = k;
      let mut best = self.band[k * w + kl].abs();
      for i in k + 1..=last_row {
        let v = self.band[i * w + k + kl - i].abs();
        if v > best {
          best = v;
          p = i;
        }
      }
      if best <= PIVOT_TOL || !best.is_finite() {
        return Err(SolveError::SingularMatrix { step: k, pivot: best });
      }
      self.piv[k] = p;
      if p != k {
        for j in k..=last_col {
          self.band.swap(k * w + j + kl - k, p * w + j + kl - p);
        }
      }
      let pivot = self.band[k * w + kl];
      let len = last_col - k;
      for i in k + 1..=last_row {
        let ik = i * w + k + kl - i;
        let l = self.band[ik] / pivot;
        self.band[ik] = l;
        if l == 0.0 {
          continue;
        }
        let (head, tail) = self.band.split_at_mut(i * w);
        let src = &head[k * w + kl + 1..k * w + kl + 1 + len];
        let dst = &mut tail[k + 1 + kl - i..k + 1 + kl - i + len];
        for (d, s) in dst.iter_mut().zip(src) {
          *d -= l * s;
        }
      }
    }
    Ok(())
  }

  fn solve_scaled(&self, rhs: &[f64]) -> Vec<f64> {
    let (n, kl, ku, w) = (self.n, self.kl, self.ku, self.width);
    let mut b: Vec<f64> = self.perm.iter().map(|&old| rhs[old] * self.row_scale[old]).collect();
    for k in 0..n {
      let p = self.piv[k];
      if p != k {
        b.swap(k, p);
      }
      let bk = b[k];
      if bk != 0.0 {
        for i in k + 1..=(k + kl).min(n - 1) {
          b[i] -= self.band[i * w + k + kl - i] * bk;
        }
      }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
      let mut s = b[i];
      let last = (i + ku + kl).min(n - 1);
      let row = &self.band[i * w + kl + 1..i * w + kl + 1 + (last - i)];
      for (a, xj) in row.iter().zip(&x[i + 1..=last]) {
        s -= a * xj;
      }
      x[i] = s / self.band[i * w + kl];
    }
    let mut out = vec![0.0; n];
    for (new, &old) in self.perm.iter().enumerate() {
      out[old] = x[new] * self.col_scale[old];
    }
    out
  }

  fn scaled_norm(&self, r: &[f64]) -> f64 {
    r.iter().zip(&self.row_scale).fold(0.0f64, |m, (v, s)| m.max((v * s).abs()))
  }

  /// Solves `A x = b` with `x` orthogonal to the nullspace.
  pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SolveError> {
    self.solve_with_scale(b, 0.0)
  }

  /// As [`LuFactor::solve`], with nullspace compatibility judged against
  /// `max(|b|, scale)`; use when `b` may be cancellation noise of a larger load.
  pub fn solve_with_scale(&self, b: &[f64], scale: f64) -> Result<Vec<f64>, SolveError> {
    self.solve_within(b, scale, RESIDUAL_TOL)
  }

  /// As [`LuFactor::solve_with_scale`] with a caller-chosen bound on the
  /// relative scaled residual; for inner solves of an outer iteration.
  pub fn solve_within(&self, b: &[f64], scale: f64, tol: f64) -> Result<Vec<f64>, SolveError> {
    assert_eq!(b.len(), self.n);
    let mut rhs = b.to_vec();
    let bnorm = norm2(b).max(scale);
    for v in &self.nullspace {
      let c = dot(v, &rhs);
      if c.abs() > COMPAT_TOL * bnorm.max(f64::MIN_POSITIVE) && c.abs() > 1e-300 {
        return Err(SolveError::IncompatibleRhs { component: c / bnorm });
      }
      axpy(-c, v, &mut rhs);
    }
    let compatible = rhs.clone();
    for &p in &self.pinned {
      rhs[p] = 0.0;
    }
    let ref_norm = self.scaled_norm(&rhs);
    if ref_norm == 0.0 {
      return Ok(vec![0.0; self.n]);
    }
    let mut x = self.solve_scaled(&rhs);
    for _ in 0..4 {
      let ax = self.a_pinned.mul_vec(&x);
      let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
      if self.scaled_norm(&r) <= 1e-15 * ref_norm {
        break;
      }
      let dx = self.solve_scaled(&r);
      for (xi, d) in x.iter_mut().zip(&dx) {
        *xi += d;
      }
    }
    for v in &self.nullspace {
      let c = dot(v, &x);
      axpy(-c, v, &mut x);
    }
    let ax = self.a.mul_vec(&x);
    let r: Vec<f64> = compatible.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let residual = self.scaled_norm(&r) / self.scaled_norm(&compatible);
    if residual > tol {
      return Err(SolveError::Inaccurate { residual });
    }
    Ok(x)
  }

  pub fn dim(&self) -> usize {
    self.n
  }

  /// Half bandwidths after reordering.
  pub fn bandwidth(&self) -> (usize, usize) {
    (self.kl, self.ku)
  }
}

/// One-shot solve; see [`LuFactor`].
pub fn solve_sparse(a: &SparseMatrix, b: &[f64], nullspace: &[Vec<f64>]) -> Result<Vec<f64>, SolveError> {
  LuFactor::new(a, nullspace)?.solve(b)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
  a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
  libm::sqrt(dot(a, a))
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
  for (yi, xi) in y.iter_mut().zip(x) {
    *yi += a * xi;
  }
}

fn orthonormalize(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
  let mut out: Vec<Vec<f64>> = Vec::new();
  for v in vs {
    let mut w = v.clone();
    for _ in 0..2 {
      for u in &out {
        let c = dot(u, &w);
        axpy(-c, u, &mut w);
      }
    }
    let nrm = norm2(&w);
    if nrm > 1e-12 * norm2(v).max(f64::MIN_POSITIVE) {
      w.iter_mut().for_each(|x| *x /= nrm);
      out.push(w);
    }
  }
  out
}

/// Picks one index per basis vector so that the basis restricted to the
/// picked indices is nonsingular.
fn pin_indices(basis: &[Vec<f64>], n: usize) -> Vec<usize> {
  let mut work: Vec<Vec<f64>> = basis.to_vec();
  let mut pinned = Vec::new();
  for r in 0..work.len() {
    let mut best = 0.0;
    let mut p = 0;
    for i in 0..n {
      if pinned.contains(&i) {
        continue;
      }
      if work[r][i].abs() > best {
        best = work[r][i].abs();
        p = i;
      }
    }
    pinned.push(p);
    let piv = work[r][p];
    let (head, tail) = work.split_at_mut(r + 1);
    for s in tail.iter_mut() {
      let f = s[p] / piv;
      axpy(-f, &head[r], s);
    }
  }
  pinned
}

/// Reverse Cuthill–McKee ordering of the symmetrized pattern; `out[new] = old`.
pub fn rcm_order(a: &SparseMatrix) -> Vec<usize> {
  let n = a.n_rows;
  let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
  for i in 0..n {
    for k in a.row_ptr[i]..a.row_ptr[i + 1] {
      let j = a.col_idx[k];
      if i != j {
        adj[i].push(j);
        adj[j].push(i);
      }
    }
  }
  for l in adj.iter_mut() {
    l.sort_unstable();
    l.dedup();
  }
  let deg: Vec<usize> = adj.iter().map(|l| l.len()).collect();
  let mut visited = vec![false; n];
  let mut order = Vec::with_capacity(n);
  let mut by_degree: Vec<usize> = (0..n).collect();
  by_degree.sort_by_key(|&i| (deg[i], i));
  for &seed in &by_degree {
    if visited[seed] {
      continue;
    }
    let start = pseudo_peripheral(seed, &adj, &deg);
    let mut queue = VecDeque::new();
    visited[start] = true;
    queue.push_back(start);
    while let Some(v) = queue.pop_front() {
      order.push(v);
      let mut nbrs: Vec<usize> = adj[v].iter().cloned().filter(|&u| !visited[u]).collect();
      nbrs.sort_by_key(|&u| (deg[u], u));
      for u in nbrs {
        visited[u] = true;
        queue.push_back(u);
      }
    }
  }
  order.reverse();
  order
}

fn bfs_levels(start: usize, adj: &[Vec<usize>]) -> Vec<usize> {
  let mut level = vec![usize::MAX; adj.len()];
  let mut queue = VecDeque::new();
  level[start] = 0;
  queue.push_back(start);
  while let Some(v) = queue.pop_front() {
    for &u in &adj[v] {
      if level[u] == usize::MAX {
        level[u] = level[v] + 1;
        queue.push_back(u);
      }
    }
  }
  level
}

fn pseudo_peripheral(seed: usize, adj: &[Vec<usize>], deg: &[usize]) -> usize {
  let mut v = seed;
  let mut ecc = 0;
  for _ in 0..8 {
    let level = bfs_levels(v, adj);
    let max_level = level.iter().filter(|&&l| l != usize::MAX).max().cloned().unwrap_or(0);
    if max_level <= ecc && ecc > 0 {
      break;
    }
    ecc = max_level;
    let far = (0..adj.len()).filter(|&u| level[u] == max_level).min_by_key(|&u| (deg[u], u)).unwrap();
    if far == v {
      break;
    }
    v = far;
  }
  v
}
