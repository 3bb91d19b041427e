//! Effective coefficients of the macroscopic model.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fem::assemble::QuadSet;
use crate::fem::element::FacetGeometry;
use crate::fem::Permeability;
use crate::materials::{CompressibilityIndex, Materials};
use crate::mesh::{CellMesh, Facet};
use crate::micro_cell::{
  elements_where, gather_extended, local_gradients, solve_stokes_correctors, sym_pairs, CellError, CorrectorSet, Pore,
  StokesCorrectors,
};
use crate::tensor::{Mat, Tensor4};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HomogenizeError {
  #[error("coefficient invariant violated: {0}")]
  InvariantViolation(String),
  #[error(transparent)]
  Cell(#[from] CellError),
  #[error("sweep grid must be sorted ascending")]
  UnsortedGrid,
}

/// Coefficients of the macroscopic Biot model with two pore pressures.
/// Pore index 0 is the channel, 1 the inclusions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogenizedCoefficients {
  pub dim: usize,
  /// Drained elasticity `A_klij`, stored as `a.t[k][l][i][j]`.
  pub a: Tensor4,
  pub b: [Mat; 2],
  pub m: [[f64; 2]; 2],
  /// Permeability with the rescaled viscosity included.
  pub k: Mat,
  pub phi: [f64; 2],
  pub gamma: f64,
}

impl HomogenizedCoefficients {
  /// Leading `dim × dim` block: plane strain for a 3D cell used in 2D.
  pub fn restrict(&self, dim: usize) -> Self {
    let mut out = self.clone();
    out.dim = dim;
    out.a = restrict4(&self.a, dim);
    out.b = [restrict2(&self.b[0], dim), restrict2(&self.b[1], dim)];
    out.k = restrict2(&self.k, dim);
    out
  }

  /// Coefficients of the non-porous substrate.
  pub fn elastic(dim: usize, c: Tensor4, gamma: f64) -> Self {
    Self { dim, a: c, b: [Mat::zeros(dim); 2], m: [[0.0; 2]; 2], k: Mat::zeros(dim), phi: [0.0; 2], gamma }
  }
}

pub fn restrict2(m: &Mat, dim: usize) -> Mat {
  let mut out = Mat::zeros(dim);
  for i in 0..dim {
    for j in 0..dim {
      out.m[i][j] = m.m[i][j];
    }
  }
  out
}

pub fn restrict4(t: &Tensor4, dim: usize) -> Tensor4 {
  let mut out = Tensor4::zeros(dim);
  for i in 0..dim {
    for j in 0..dim {
      for k in 0..dim {
        for l in 0..dim {
          out.t[i][j][k][l] = t.t[i][j][k][l];
        }
      }
    }
  }
  out
}

/// Independent evaluations of the same coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualRoutes {
  /// `a(ω^P, Π^{ij}) + φ_P δ_ij`.
  pub b_energy: [Mat; 2],
  /// `⨍_{Y_P} ∇·ω̃^{ij} + φ_P δ_ij`.
  pub b_volume: [Mat; 2],
  /// `⨍_{Γ_P} ω^{ij}·n^{[P]} + φ_P δ_ij`.
  pub b_surface: [Mat; 2],
  /// `a(ω^P, ω^Q) + γ` term.
  pub m_energy: [[f64; 2]; 2],
  /// `−⨍_{Γ_Q} ω^P·n^{[Q]} + γ` term.
  pub m_surface: [[f64; 2]; 2],
  /// `⨍_{Y_f} ψ^i_j`.
  pub k_direct: Mat,
  /// `a_f(ψ^j, ψ^i) + ∮ κ̂ ⟦π^j⟧⟦π^i⟧`.
  pub k_energy: Mat,
}

impl DualRoutes {
  /// Largest relative disagreement between the routes for `B`, `M` and `K`.
  pub fn discrepancy(&self) -> (f64, f64, f64) {
    let mut db: f64 = 0.0;
    let mut sb: f64 = 0.0;
    for p in 0..2 {
      sb = sb.max(self.b_energy[p].max_abs());
      db = db.max(self.b_energy[p].sub(&self.b_volume[p]).max_abs());
      db = db.max(self.b_energy[p].sub(&self.b_surface[p]).max_abs());
    }
    let mut dm: f64 = 0.0;
    let mut sm: f64 = 0.0;
    for p in 0..2 {
      for q in 0..2 {
        sm = sm.max(self.m_energy[p][q].abs());
        dm = dm.max((self.m_energy[p][q] - self.m_surface[p][q]).abs());
      }
    }
    let sk = self.k_direct.max_abs();
    let dk = self.k_direct.sub(&self.k_energy).max_abs();
    let rel = |d: f64, s: f64| if s > 0.0 { d / s } else { d };
    (rel(db, sb), rel(dm, sm), rel(dk, sk))
  }
}

/// `⨍ e(u) : A e(v)` with `u = ω_u + Π(E_u)`, `v = ω_v + Π(E_v)`.
pub fn energy(mesh: &CellMesh, mats: &Materials, corr: &CorrectorSet, u: (Option<&[f64]>, &Mat), v: (Option<&[f64]>, &Mat)) -> f64 {
  let dim = mesh.dim();
  let quad = QuadSet::new(dim, 2);
  let mut s = 0.0;
  for &e in &corr.u_map.elements {
    let c = mats.solid_tensor(dim, mesh.tags[e]);
    let geom = quad.geometry(&mesh.grid, e);
    let gu = u.0.map(|x| local_gradients(dim, &geom, &quad.q1, &corr.u_map.gather(e, x)));
    let gv = v.0.map(|x| local_gradients(dim, &geom, &quad.q1, &corr.u_map.gather(e, x)));
    for q in 0..quad.rule.len() {
      let eu = gu.as_ref().map_or(*u.1, |g| g[q].sym().add(u.1));
      let ev = gv.as_ref().map_or(*v.1, |g| g[q].sym().add(v.1));
      s += geom.jxw[q] * ev.ddot(&c.ddot(&eu));
    }
  }
  s / corr.volume
}

/// `⨍_{Y_P} ∇·ṽ` of a solid field extended by zero into pore `P`.
pub fn pore_divergence(mesh: &CellMesh, corr: &CorrectorSet, pore: Pore, x: &[f64]) -> f64 {
  let dim = mesh.dim();
  let quad = QuadSet::new(dim, 2);
  let mut s = 0.0;
  for e in elements_where(mesh, |t| pore.contains(t)) {
    let geom = quad.geometry(&mesh.grid, e);
    let g = local_gradients(dim, &geom, &quad.q1, &gather_extended(&mesh.grid, &corr.u_map, e, x));
    for q in 0..quad.rule.len() {
      s += geom.jxw[q] * g[q].trace();
    }
  }
  s / corr.volume
}

/// `⨍_{Γ_P} v·n^{[P]}` with the normal leaving the pore.
pub fn pore_flux(mesh: &CellMesh, corr: &CorrectorSet, pore: Pore, x: &[f64]) -> f64 {
  let facets: &[Facet] = match pore {
    Pore::Channel => &mesh.facets.fluid_solid,
    Pore::Inclusion => &mesh.facets.inclusion,
  };
  let dim = mesh.dim();
  let mut s = 0.0;
  for f in facets {
    let fq = QuadSet::face(dim, 2, f.axis, f.side);
    let fg = FacetGeometry::new(dim, &mesh.grid.element_vertex_coords(f.elem), f.axis, f.side, &fq.rule, &fq.geo);
    let local = gather_extended(&mesh.grid, &corr.u_map, f.elem, x);
    for q in 0..fq.rule.len() {
      for a in 0..fq.q1.n_basis {
        let nv = fq.q1.val(q, a);
        for i in 0..dim {
          s += fg.sxw[q] * nv * local[a * dim + i] * fg.normal[q][i];
        }
      }
    }
  }
  s / corr.volume
}

/// `⨍_{Y_f} ψ^i_j` and the energy route, for given flow correctors.
pub fn permeability(stokes: &StokesCorrectors) -> (Mat, Mat) {
  let dim = stokes.loads.len();
  let mut direct = Mat::zeros(dim);
  let mut en = Mat::zeros(dim);
  for i in 0..dim {
    for j in 0..dim {
      direct.m[i][j] = dot(&stokes.loads[j], &stokes.psi[i]);
      let mut v = stokes.viscosity.bilinear(&stokes.psi[i], &stokes.psi[j]);
      if let Some(jm) = &stokes.jump {
        v += jm.bilinear(&stokes.pi[i], &stokes.pi[j]);
      }
      en.m[i][j] = v;
    }
  }
  (direct, en)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
  a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Evaluates all coefficients with their dual routes and checks the invariants.
pub fn compute_coefficients(
  mesh: &CellMesh,
  corr: &CorrectorSet,
  mats: &Materials,
) -> Result<(HomogenizedCoefficients, DualRoutes), HomogenizeError> {
  let (hc, routes) = evaluate(mesh, corr, mats);
  check_invariants(mesh, &hc, &routes)?;
  Ok((hc, routes))
}

/// Evaluation without the invariant checks.
pub fn evaluate(mesh: &CellMesh, corr: &CorrectorSet, mats: &Materials) -> (HomogenizedCoefficients, DualRoutes) {
  let dim = mesh.dim();
  let pairs = sym_pairs(dim);
  let phi = [mesh.porosity_channel(), mesh.porosity_inclusion()];
  let gamma = mats.gamma;

  let mut a = Tensor4::zeros(dim);
  for (pa, &(i, j)) in pairs.iter().enumerate() {
    for (pb, &(k, l)) in pairs.iter().enumerate().skip(pa) {
      let v = energy(
        mesh,
        mats,
        corr,
        (Some(&corr.strain[pa]), &Mat::sym_unit(dim, i, j)),
        (Some(&corr.strain[pb]), &Mat::sym_unit(dim, k, l)),
      );
      for (x, y) in [(i, j), (j, i)] {
        for (z, w) in [(k, l), (l, k)] {
          a.t[z][w][x][y] = v;
          a.t[x][y][z][w] = v;
        }
      }
    }
  }

  let mut b_energy = [Mat::zeros(dim); 2];
  let mut b_volume = [Mat::zeros(dim); 2];
  let mut b_surface = [Mat::zeros(dim); 2];
  for p in Pore::ALL {
    let pi = p as usize;
    for (pa, &(i, j)) in pairs.iter().enumerate() {
      let d = if i == j { phi[pi] } else { 0.0 };
      let en = energy(mesh, mats, corr, (Some(&corr.pressure[pi]), &Mat::zeros(dim)), (None, &Mat::sym_unit(dim, i, j))) + d;
      let vol = pore_divergence(mesh, corr, p, &corr.strain[pa]) + d;
      let sur = pore_flux(mesh, corr, p, &corr.strain[pa]) + d;
      for (x, y) in [(i, j), (j, i)] {
        b_energy[pi].m[x][y] = en;
        b_volume[pi].m[x][y] = vol;
        b_surface[pi].m[x][y] = sur;
      }
    }
  }

  let mut m_energy = [[0.0; 2]; 2];
  let mut m_surface = [[0.0; 2]; 2];
  for p in Pore::ALL {
    for q in Pore::ALL {
      let (pi, qi) = (p as usize, q as usize);
      let g = if pi == qi {
        match mats.compressibility_index {
          CompressibilityIndex::PerPore => phi[pi] * gamma,
          CompressibilityIndex::ChannelOnly => phi[0] * gamma,
        }
      } else {
        0.0
      };
      let z = Mat::zeros(dim);
      m_energy[pi][qi] = energy(mesh, mats, corr, (Some(&corr.pressure[pi]), &z), (Some(&corr.pressure[qi]), &z)) + g;
      m_surface[pi][qi] = -pore_flux(mesh, corr, q, &corr.pressure[pi]) + g;
    }
  }

  let (k_direct, k_energy) = permeability(&corr.stokes);
  let hc = HomogenizedCoefficients { dim, a, b: b_energy, m: m_energy, k: k_direct, phi, gamma };
  (hc, DualRoutes { b_energy, b_volume, b_surface, m_energy, m_surface, k_direct, k_energy })
}

/// Relative tolerance of the dual-route agreement.
pub const DUAL_TOL: f64 = 1e-7;

pub fn check_invariants(mesh: &CellMesh, hc: &HomogenizedCoefficients, routes: &DualRoutes) -> Result<(), HomogenizeError> {
  let fail = |s: String| Err(HomogenizeError::InvariantViolation(s));
  let an = hc.a.max_abs();
  if hc.a.major_asymmetry() > 1e-10 * an || hc.a.minor_asymmetry() > 1e-10 * an {
    return fail(format!("drained elasticity not symmetric ({:e})", hc.a.major_asymmetry() / an));
  }
  let lam = hc.a.min_eigenvalue_on_sym();
  let wraps = mesh.solid_wraps();
  let percolates = (0..hc.dim).all(|a| wraps[a]);
  if lam < -1e-9 * an || (percolates && lam <= 1e-9 * an) {
    return fail(format!("drained elasticity not positive (min eigenvalue {lam:e})"));
  }
  let present = [true, mesh.has_inclusion()];
  if (hc.m[0][1] - hc.m[1][0]).abs() > 1e-10 * hc.m[0][0].abs().max(hc.m[1][1].abs()) {
    return fail("Biot modulus not symmetric".into());
  }
  let det = hc.m[0][0] * hc.m[1][1] - hc.m[0][1] * hc.m[1][0];
  if hc.m[0][0] <= 0.0 || (present[1] && (hc.m[1][1] <= 0.0 || det <= 0.0)) {
    return fail(format!("Biot modulus not positive definite ({:?})", hc.m));
  }
  let kn = hc.k.max_abs();
  if hc.k.asymmetry() > 1e-8 * kn.max(f64::MIN_POSITIVE) {
    return fail("permeability not symmetric".into());
  }
  if hc.k.sym().min_sym_eigenvalue() < -1e-8 * kn {
    return fail("permeability not positive semidefinite".into());
  }
  if hc.phi[0] < 0.0 || hc.phi[1] < 0.0 || hc.phi[0] + hc.phi[1] >= 1.0 {
    return fail("porosities out of range".into());
  }
  let (db, dm, dk) = routes.discrepancy();
  if db > DUAL_TOL || dm > DUAL_TOL {
    return fail(format!("dual routes disagree: B {db:e}, M {dm:e}"));
  }
  if dk > 1e-8 {
    return fail(format!("permeability routes disagree: {dk:e}"));
  }
  Ok(())
}

/// Permeability over a grid of membrane permeabilities; `Infinite` sorts last.
pub fn permeability_sweep(mesh: &CellMesh, mu_bar: f64, grid: &[Permeability]) -> Result<Vec<(Permeability, Mat)>, HomogenizeError> {
  let key = |k: &Permeability| match k {
    Permeability::Finite(v) => *v,
    Permeability::Infinite => f64::INFINITY,
  };
  if grid.windows(2).any(|w| key(&w[0]) > key(&w[1])) {
    return Err(HomogenizeError::UnsortedGrid);
  }
  let mut out = Vec::with_capacity(grid.len());
  for &kappa in grid {
    let s = solve_stokes_correctors(mesh, mu_bar, kappa)?;
    out.push((kappa, permeability(&s).0));
  }
  Ok(out)
}

/// Evenly spaced finite membrane permeabilities `[lo, hi]`.
pub fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<Permeability> {
  if n == 1 {
    return vec![Permeability::Finite(lo)];
  }
  (0..n).map(|i| Permeability::Finite(lo + (hi - lo) * i as f64 / (n - 1) as f64)).collect()
}

#[cfg(test)]
mod tests {
  use super::*;
  use crate::mesh::{build_cell_mesh, CellGeometrySpec};
  use crate::micro_cell::solve_correctors;

  #[test]
  fn homogeneous_cell_without_pores_is_plain_elasticity() {
    let spec = CellGeometrySpec {
      dim: 2,
      resolution: 8,
      channel_radius: 0.0,
      inclusion_radius: 0.0,
      stiff_shell_thickness: 0.0,
      n_compartments: 1,
      membrane_positions: vec![],
      channel_axes: vec![0],
    };
    let mesh = build_cell_mesh(&spec).unwrap();
    let mats = Materials::default().equalized();
    let corr = solve_correctors(&mesh, &mats).unwrap();
    assert!(corr.strain.iter().flatten().all(|v| v.abs() < 1e-12));
    let (hc, _) = evaluate(&mesh, &corr, &mats);
    let c = mats.soft.tensor(2);
    assert!(hc.a.axpy(-1.0, &c).max_abs() < 1e-9 * c.max_abs());
    assert!(hc.b[0].max_abs() == 0.0 && hc.b[1].max_abs() == 0.0);
    assert!(hc.k.max_abs() == 0.0);
    assert_eq!(hc.m, [[0.0; 2]; 2]);
  }

  #[test]
  fn unsorted_sweep_rejected() {
    let mesh = build_cell_mesh(&CellGeometrySpec::paper_like(2, 8)).unwrap();
    let g = [Permeability::Finite(1.0), Permeability::Finite(0.5)];
    assert_eq!(permeability_sweep(&mesh, 1.0, &g), Err(HomogenizeError::UnsortedGrid));
  }
}
