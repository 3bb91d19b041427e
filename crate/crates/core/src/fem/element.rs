//! Tensor-product Lagrange elements on `[-1, 1]^dim` with a multilinear geometry map.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Mat;

/// Tensor-product Gauss–Legendre rule. Weights sum to `2^dim`.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
  pub dim: usize,
  pub points: Vec<[f64; 3]>,
  pub weights: Vec<f64>,
}

fn gauss_1d(n: usize) -> (Vec<f64>, Vec<f64>) {
  match n {
    1 => (vec![0.0], vec![2.0]),
    2 => {
      let a = 1.0 / libm::sqrt(3.0);
      (vec![-a, a], vec![1.0, 1.0])
    }
    3 => {
      let a = libm::sqrt(0.6);
      (vec![-a, 0.0, a], vec![5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])
    }
    4 => {
      let s = libm::sqrt(6.0 / 5.0);
      let a = libm::sqrt(3.0 / 7.0 - 2.0 / 7.0 * s);
      let b = libm::sqrt(3.0 / 7.0 + 2.0 / 7.0 * s);
      let s30 = libm::sqrt(30.0);
      let wa = (18.0 + s30) / 36.0;
      let wb = (18.0 - s30) / 36.0;
      (vec![-b, -a, a, b], vec![wb, wa, wa, wb])
    }
    _ => panic!("gauss rule with {n} points not tabulated"),
  }
}

impl QuadratureRule {
  /// `n` points per direction.
  pub fn gauss(dim: usize, n: usize) -> Self {
    let (x, w) = gauss_1d(n);
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let nz = if dim == 3 { n } else { 1 };
    for k in 0..nz {
      for j in 0..n {
        for i in 0..n {
          let mut p = [0.0; 3];
          p[0] = x[i];
          p[1] = x[j];
          let mut wt = w[i] * w[j];
          if dim == 3 {
            p[2] = x[k];
            wt *= w[k];
          }
          points.push(p);
          weights.push(wt);
        }
      }
    }
    Self { dim, points, weights }
  }

  /// Rule on the face `ξ_axis = ±1` of the reference element.
  pub fn face(dim: usize, n: usize, axis: usize, side: usize) -> Self {
    let (x, w) = gauss_1d(n);
    let fixed = if side == 0 { -1.0 } else { 1.0 };
    let others: Vec<usize> = (0..dim).filter(|&a| a != axis).collect();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let n2 = if dim == 3 { n } else { 1 };
    for j in 0..n2 {
      for i in 0..n {
        let mut p = [0.0; 3];
        p[axis] = fixed;
        p[others[0]] = x[i];
        let mut wt = w[i];
        if dim == 3 {
          p[others[1]] = x[j];
          wt *= w[j];
        }
        points.push(p);
        weights.push(wt);
      }
    }
    Self { dim, points, weights }
  }

  pub fn len(&self) -> usize {
    self.weights.len()
  }

  pub fn is_empty(&self) -> bool {
    self.weights.is_empty()
  }
}

fn lagrange_1d(order: usize, x: f64) -> ([f64; 3], [f64; 3]) {
  match order {
    1 => ([0.5 * (1.0 - x), 0.5 * (1.0 + x), 0.0], [-0.5, 0.5, 0.0]),
    2 => (
      [0.5 * x * (x - 1.0), 1.0 - x * x, 0.5 * x * (x + 1.0)],
      [x - 0.5, -2.0 * x, x + 0.5],
    ),
    _ => panic!("unsupported order {order}"),
  }
}

/// Number of local nodes of a `Q_order` element.
pub fn n_local(dim: usize, order: usize) -> usize {
  (order + 1).pow(dim as u32)
}

/// Local multi-index of local node `a` (x fastest).
pub fn local_index(dim: usize, order: usize, a: usize) -> [usize; 3] {
  let p = order + 1;
  let mut out = [0; 3];
  out[0] = a % p;
  out[1] = (a / p) % p;
  if dim == 3 {
    out[2] = a / (p * p);
  }
  out
}

/// Values and reference gradients of all `Q_order` basis functions at `xi`.
pub fn eval_basis(dim: usize, order: usize, xi: &[f64; 3], vals: &mut [f64], grads: &mut [[f64; 3]]) {
  let (vx, dx) = lagrange_1d(order, xi[0]);
  let (vy, dy) = lagrange_1d(order, xi[1]);
  let (vz, dz) = if dim == 3 { lagrange_1d(order, xi[2]) } else { ([1.0, 0.0, 0.0], [0.0; 3]) };
  for a in 0..n_local(dim, order) {
    let [i, j, k] = local_index(dim, order, a);
    vals[a] = vx[i] * vy[j] * vz[k];
    grads[a] = [dx[i] * vy[j] * vz[k], vx[i] * dy[j] * vz[k], vx[i] * vy[j] * dz[k]];
  }
}

/// Basis values and reference gradients tabulated at the points of a rule.
#[derive(Clone, Debug)]
pub struct Tabulation {
  pub order: usize,
  pub n_basis: usize,
  pub vals: Vec<f64>,
  pub grads: Vec<[f64; 3]>,
}

impl Tabulation {
  pub fn new(dim: usize, order: usize, rule: &QuadratureRule) -> Self {
    let nb = n_local(dim, order);
    let mut vals = vec![0.0; nb * rule.len()];
    let mut grads = vec![[0.0; 3]; nb * rule.len()];
    for (q, p) in rule.points.iter().enumerate() {
      eval_basis(dim, order, p, &mut vals[q * nb..(q + 1) * nb], &mut grads[q * nb..(q + 1) * nb]);
    }
    Self { order, n_basis: nb, vals, grads }
  }

  #[inline]
  pub fn val(&self, q: usize, a: usize) -> f64 {
    self.vals[q * self.n_basis + a]
  }

  #[inline]
  pub fn grad(&self, q: usize, a: usize) -> &[f64; 3] {
    &self.grads[q * self.n_basis + a]
  }
}

/// Geometry of one element at the points of a quadrature rule.
#[derive(Clone, Debug)]
pub struct ElementGeometry {
  pub dim: usize,
  /// `|det J| * w_q`.
  pub jxw: Vec<f64>,
  /// Inverse Jacobian `∂ξ/∂x` per point.
  pub inv_jac: Vec<Mat>,
  /// Physical coordinates per point.
  pub x: Vec<[f64; 3]>,
}

impl ElementGeometry {
  /// `verts` are the `2^dim` vertices in local order; `geo` tabulates `Q1` on the rule.
  pub fn new(dim: usize, verts: &[[f64; 3]], rule: &QuadratureRule, geo: &Tabulation) -> Self {
    let nq = rule.len();
    let mut jxw = Vec::with_capacity(nq);
    let mut inv_jac = Vec::with_capacity(nq);
    let mut xs = Vec::with_capacity(nq);
    for q in 0..nq {
      let (jac, x) = jacobian(dim, verts, geo, q);
      let det = jac.det();
      assert!(det > 0.0, "inverted element (det J = {det})");
      jxw.push(det * rule.weights[q]);
      inv_jac.push(jac.inverse().unwrap());
      xs.push(x);
    }
    Self { dim, jxw, inv_jac, x: xs }
  }

  /// Physical gradient from a reference gradient at point `q`.
  #[inline]
  pub fn phys_grad(&self, q: usize, g: &[f64; 3]) -> [f64; 3] {
    let ij = &self.inv_jac[q].m;
    let mut out = [0.0; 3];
    for i in 0..self.dim {
      for j in 0..self.dim {
        out[i] += ij[j][i] * g[j];
      }
    }
    out
  }

  pub fn volume(&self) -> f64 {
    self.jxw.iter().sum()
  }
}

/// Jacobian `∂x/∂ξ` and position at tabulation point `q`.
pub fn jacobian(dim: usize, verts: &[[f64; 3]], geo: &Tabulation, q: usize) -> (Mat, [f64; 3]) {
  let mut jac = Mat::zeros(dim);
  let mut x = [0.0; 3];
  for (a, v) in verts.iter().enumerate() {
    let g = geo.grad(q, a);
    let n = geo.val(q, a);
    for i in 0..dim {
      x[i] += n * v[i];
      for j in 0..dim {
        jac.m[i][j] += v[i] * g[j];
      }
    }
  }
  (jac, x)
}

/// Facet geometry on the face `ξ_axis = side` of an element.
#[derive(Clone, Debug)]
pub struct FacetGeometry {
  /// Surface measure times weight.
  pub sxw: Vec<f64>,
  /// Unit normal pointing out of the element.
  pub normal: Vec<[f64; 3]>,
  /// Inverse Jacobian of the volume map at the facet points.
  pub inv_jac: Vec<Mat>,
  pub x: Vec<[f64; 3]>,
}

impl FacetGeometry {
  pub fn new(dim: usize, verts: &[[f64; 3]], axis: usize, side: usize, rule: &QuadratureRule, geo: &Tabulation) -> Self {
    let sign = if side == 0 { -1.0 } else { 1.0 };
    let mut sxw = Vec::new();
    let mut normal = Vec::new();
    let mut inv_jac = Vec::new();
    let mut xs = Vec::new();
    for q in 0..rule.len() {
      let (jac, x) = jacobian(dim, verts, geo, q);
      let det = jac.det();
      let inv = jac.inverse().unwrap();
      // Nanson: n dS = det J J^{-T} N dS_ref.
      let mut nv = [0.0; 3];
      for i in 0..dim {
        nv[i] = sign * inv.m[axis][i];
      }
      let len = libm::sqrt(nv.iter().map(|v| v * v).sum::<f64>());
      for v in nv.iter_mut() {
        *v /= len;
      }
      sxw.push(det * len * rule.weights[q]);
      normal.push(nv);
      inv_jac.push(inv);
      xs.push(x);
    }
    Self { sxw, normal, inv_jac, x: xs }
  }

  #[inline]
  pub fn phys_grad(&self, dim: usize, q: usize, g: &[f64; 3]) -> [f64; 3] {
    let ij = &self.inv_jac[q].m;
    let mut out = [0.0; 3];
    for i in 0..dim {
      for j in 0..dim {
        out[i] += ij[j][i] * g[j];
      }
    }
    out
  }
}

#[cfg(test)]
mod tests {
  use super::*;

  #[test]
  fn weights_sum_to_reference_measure() {
    for dim in [2, 3] {
      for n in 1..=4 {
        let r = QuadratureRule::gauss(dim, n);
        let s: f64 = r.weights.iter().sum();
        assert!((s - 2f64.powi(dim as i32)).abs() < 1e-13);
      }
    }
  }

  #[test]
  fn partition_of_unity() {
    for dim in [2, 3] {
      for order in [1, 2] {
        let nb = n_local(dim, order);
        let mut v = vec![0.0; nb];
        let mut g = vec![[0.0; 3]; nb];
        eval_basis(dim, order, &[0.3, -0.7, 0.1], &mut v, &mut g);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        for c in 0..3 {
          assert!(g.iter().map(|x| x[c]).sum::<f64>().abs() < 1e-14);
        }
      }
    }
  }

  #[test]
  fn gauss_integrates_cubics_exactly() {
    let r = QuadratureRule::gauss(2, 2);
    let s: f64 = r.points.iter().zip(&r.weights).map(|(p, w)| w * p[0].powi(2) * p[1].powi(3)).sum();
    assert!(s.abs() < 1e-15);
    let s: f64 = r.points.iter().zip(&r.weights).map(|(p, w)| w * p[0].powi(2) * p[1].powi(2)).sum();
    assert!((s - 4.0 / 9.0).abs() < 1e-14);
  }

  #[test]
  fn facet_measure_and_normal_on_square() {
    let verts = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2.0, 1.0, 0.0]];
    for (axis, side, len, n) in [(0, 1, 1.0, [1.0, 0.0]), (1, 0, 2.0, [0.0, -1.0])] {
      let rule = QuadratureRule::face(2, 2, axis, side);
      let geo = Tabulation::new(2, 1, &rule);
      let f = FacetGeometry::new(2, &verts, axis, side, &rule, &geo);
      assert!((f.sxw.iter().sum::<f64>() - len).abs() < 1e-14);
      assert!((f.normal[0][0] - n[0]).abs() < 1e-14 && (f.normal[0][1] - n[1]).abs() < 1e-14);
    }
  }
}
