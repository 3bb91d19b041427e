//! Small dense tensors of dimension 2 or 3.
//!
//! Storage is always 3-wide; entries beyond `dim` stay zero.

use serde::{Deserialize, Serialize};

/// Second-order tensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
  pub dim: usize,
  pub m: [[f64; 3]; 3],
}

impl Mat {
  pub fn zeros(dim: usize) -> Self {
    Self { dim, m: [[0.0; 3]; 3] }
  }

  pub fn identity(dim: usize) -> Self {
    let mut out = Self::zeros(dim);
    for i in 0..dim {
      out.m[i][i] = 1.0;
    }
    out
  }

  /// `e_i ⊗ e_j`.
  pub fn unit(dim: usize, i: usize, j: usize) -> Self {
    let mut out = Self::zeros(dim);
    out.m[i][j] = 1.0;
    out
  }

  /// Symmetric unit strain `(e_i ⊗ e_j + e_j ⊗ e_i) / 2`.
  pub fn sym_unit(dim: usize, i: usize, j: usize) -> Self {
    let mut out = Self::zeros(dim);
    out.m[i][j] += 0.5;
    out.m[j][i] += 0.5;
    out
  }

  #[inline]
  pub fn get(&self, i: usize, j: usize) -> f64 {
    self.m[i][j]
  }

  pub fn transpose(&self) -> Self {
    let mut out = Self::zeros(self.dim);
    for i in 0..self.dim {
      for j in 0..self.dim {
        out.m[i][j] = self.m[j][i];
      }
    }
    out
  }

  pub fn sym(&self) -> Self {
    let mut out = Self::zeros(self.dim);
    for i in 0..self.dim {
      for j in 0..self.dim {
        out.m[i][j] = 0.5 * (self.m[i][j] + self.m[j][i]);
      }
    }
    out
  }

  pub fn trace(&self) -> f64 {
    (0..self.dim).map(|i| self.m[i][i]).sum()
  }

  /// `A : B`.
  pub fn ddot(&self, other: &Mat) -> f64 {
    let mut s = 0.0;
    for i in 0..self.dim {
      for j in 0..self.dim {
        s += self.m[i][j] * other.m[i][j];
      }
    }
    s
  }

  pub fn scale(&self, a: f64) -> Self {
    let mut out = *self;
    for row in out.m.iter_mut() {
      for v in row.iter_mut() {
        *v *= a;
      }
    }
    out
  }

  pub fn add(&self, other: &Mat) -> Self {
    self.axpy(1.0, other)
  }

  pub fn sub(&self, other: &Mat) -> Self {
    self.axpy(-1.0, other)
  }

  /// `self + a * other`.
  pub fn axpy(&self, a: f64, other: &Mat) -> Self {
    let mut out = *self;
    for i in 0..3 {
      for j in 0..3 {
        out.m[i][j] += a * other.m[i][j];
      }
    }
    out
  }

  pub fn matmul(&self, other: &Mat) -> Self {
    let mut out = Self::zeros(self.dim);
    for i in 0..self.dim {
      for j in 0..self.dim {
        for k in 0..self.dim {
          out.m[i][j] += self.m[i][k] * other.m[k][j];
        }
      }
    }
    out
  }

  pub fn mul_vec(&self, v: &[f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..self.dim {
      for j in 0..self.dim {
        out[i] += self.m[i][j] * v[j];
      }
    }
    out
  }

  pub fn norm(&self) -> f64 {
    libm::sqrt(self.ddot(self))
  }

  pub fn max_abs(&self) -> f64 {
    let mut s: f64 = 0.0;
    for i in 0..self.dim {
      for j in 0..self.dim {
        s = s.max(self.m[i][j].abs());
      }
    }
    s
  }

  pub fn det(&self) -> f64 {
    let m = &self.m;
    match self.dim {
      1 => m[0][0],
      2 => m[0][0] * m[1][1] - m[0][1] * m[1][0],
      _ => {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
          + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
      }
    }
  }

  /// Inverse; returns `None` when the determinant vanishes.
  pub fn inverse(&self) -> Option<Self> {
    let d = self.det();
    if d == 0.0 || !d.is_finite() {
      return None;
    }
    let m = &self.m;
    let mut out = Self::zeros(self.dim);
    match self.dim {
      1 => out.m[0][0] = 1.0 / d,
      2 => {
        out.m[0][0] = m[1][1] / d;
        out.m[0][1] = -m[0][1] / d;
        out.m[1][0] = -m[1][0] / d;
        out.m[1][1] = m[0][0] / d;
      }
      _ => {
        for i in 0..3 {
          for j in 0..3 {
            let (i1, i2) = ((j + 1) % 3, (j + 2) % 3);
            let (j1, j2) = ((i + 1) % 3, (i + 2) % 3);
            out.m[i][j] = (m[i1][j1] * m[i2][j2] - m[i1][j2] * m[i2][j1]) / d;
          }
        }
      }
    }
    Some(out)
  }

  /// Smallest eigenvalue of the symmetric part.
  pub fn min_sym_eigenvalue(&self) -> f64 {
    let s = self.sym();
    let m = nalgebra::DMatrix::from_fn(self.dim, self.dim, |i, j| s.m[i][j]);
    m.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
  }

  /// Largest deviation from symmetry.
  pub fn asymmetry(&self) -> f64 {
    let mut s: f64 = 0.0;
    for i in 0..self.dim {
      for j in 0..self.dim {
        s = s.max((self.m[i][j] - self.m[j][i]).abs());
      }
    }
    s
  }
}

/// Fourth-order tensor `T_ijkl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
  pub dim: usize,
  pub t: [[[[f64; 3]; 3]; 3]; 3],
}

impl Tensor4 {
  pub fn zeros(dim: usize) -> Self {
    Self { dim, t: [[[[0.0; 3]; 3]; 3]; 3] }
  }

  /// Isotropic elasticity `λ δ_ij δ_kl + μ (δ_ik δ_jl + δ_il δ_jk)`.
  pub fn isotropic(dim: usize, lambda: f64, mu: f64) -> Self {
    let mut out = Self::zeros(dim);
    let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    for i in 0..dim {
      for j in 0..dim {
        for k in 0..dim {
          for l in 0..dim {
            out.t[i][j][k][l] = lambda * d(i, j) * d(k, l) + mu * (d(i, k) * d(j, l) + d(i, l) * d(j, k));
          }
        }
      }
    }
    out
  }

  /// Newtonian viscous tensor `μ (δ_ik δ_jl + δ_il δ_jk − 2/3 δ_ij δ_kl)`.
  pub fn viscous(dim: usize, mu: f64) -> Self {
    let mut out = Self::isotropic(dim, -2.0 / 3.0 * mu, mu);
    out.dim = dim;
    out
  }

  /// Isotropic elasticity from Young's modulus and Poisson ratio (plane strain in 2D).
  pub fn from_young_poisson(dim: usize, young: f64, poisson: f64) -> Self {
    let lambda = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
    let mu = young / (2.0 * (1.0 + poisson));
    Self::isotropic(dim, lambda, mu)
  }

  #[inline]
  pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
    self.t[i][j][k][l]
  }

  /// `(T : e)_ij = T_ijkl e_kl`.
  pub fn ddot(&self, e: &Mat) -> Mat {
    let mut out = Mat::zeros(self.dim);
    for i in 0..self.dim {
      for j in 0..self.dim {
        let mut s = 0.0;
        for k in 0..self.dim {
          for l in 0..self.dim {
            s += self.t[i][j][k][l] * e.m[k][l];
          }
        }
        out.m[i][j] = s;
      }
    }
    out
  }

  /// `(e : T)_kl = e_ij T_ijkl`.
  pub fn ddot_left(&self, e: &Mat) -> Mat {
    let mut out = Mat::zeros(self.dim);
    for k in 0..self.dim {
      for l in 0..self.dim {
        let mut s = 0.0;
        for i in 0..self.dim {
          for j in 0..self.dim {
            s += e.m[i][j] * self.t[i][j][k][l];
          }
        }
        out.m[k][l] = s;
      }
    }
    out
  }

  pub fn axpy(&self, a: f64, other: &Tensor4) -> Self {
    let mut out = *self;
    for i in 0..3 {
      for j in 0..3 {
        for k in 0..3 {
          for l in 0..3 {
            out.t[i][j][k][l] += a * other.t[i][j][k][l];
          }
        }
      }
    }
    out
  }

  pub fn scale(&self, a: f64) -> Self {
    Self::zeros(self.dim).axpy(a, self)
  }

  pub fn max_abs(&self) -> f64 {
    let mut s: f64 = 0.0;
    for_each4(self.dim, |i, j, k, l| s = s.max(self.t[i][j][k][l].abs()));
    s
  }

  /// Largest violation of `T_ijkl = T_klij`.
  pub fn major_asymmetry(&self) -> f64 {
    let mut s: f64 = 0.0;
    for_each4(self.dim, |i, j, k, l| s = s.max((self.t[i][j][k][l] - self.t[k][l][i][j]).abs()));
    s
  }

  /// Largest violation of `T_ijkl = T_jikl = T_ijlk`.
  pub fn minor_asymmetry(&self) -> f64 {
    let mut s: f64 = 0.0;
    for_each4(self.dim, |i, j, k, l| {
      s = s.max((self.t[i][j][k][l] - self.t[j][i][k][l]).abs());
      s = s.max((self.t[i][j][k][l] - self.t[i][j][l][k]).abs());
    });
    s
  }

  /// Smallest eigenvalue on symmetric strains, in an orthonormal Mandel basis.
  pub fn min_eigenvalue_on_sym(&self) -> f64 {
    let basis = sym_basis(self.dim);
    let n = basis.len();
    let m = nalgebra::DMatrix::from_fn(n, n, |a, b| basis[a].ddot(&self.ddot(&basis[b])));
    let m = (&m + m.transpose()) * 0.5;
    m.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
  }
}

/// Orthonormal basis of symmetric `dim × dim` matrices.
pub fn sym_basis(dim: usize) -> alloc::vec::Vec<Mat> {
  let mut out = alloc::vec::Vec::new();
  let r = core::f64::consts::FRAC_1_SQRT_2;
  for i in 0..dim {
    for j in i..dim {
      let mut m = Mat::zeros(dim);
      if i == j {
        m.m[i][i] = 1.0;
      } else {
        m.m[i][j] = r;
        m.m[j][i] = r;
      }
      out.push(m);
    }
  }
  out
}

fn for_each4(dim: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
  for i in 0..dim {
    for j in 0..dim {
      for k in 0..dim {
        for l in 0..dim {
          f(i, j, k, l);
        }
      }
    }
  }
}

#[cfg(test)]
mod tests {
  use super::*;

  #[test]
  fn inverse_roundtrip() {
    let mut a = Mat::zeros(3);
    a.m = [[2.0, 0.5, 0.1], [0.3, 1.5, -0.2], [0.0, 0.4, 3.0]];
    let p = a.matmul(&a.inverse().unwrap());
    assert!(p.sub(&Mat::identity(3)).max_abs() < 1e-14);
  }

  #[test]
  fn isotropic_symmetries_and_lame() {
    let c = Tensor4::from_young_poisson(3, 200.0, 0.3);
    assert!(c.major_asymmetry() == 0.0 && c.minor_asymmetry() == 0.0);
    // Pure shear recovers 2μ.
    let s = c.ddot(&Mat::sym_unit(3, 0, 1));
    assert!((s.m[0][1] - 200.0 / 2.6).abs() < 1e-12);
    assert!(c.min_eigenvalue_on_sym() > 0.0);
  }

  #[test]
  fn viscous_tensor_is_deviatoric() {
    let d = Tensor4::viscous(3, 1.0);
    assert!(d.ddot(&Mat::identity(3)).max_abs() < 1e-15);
  }
}
