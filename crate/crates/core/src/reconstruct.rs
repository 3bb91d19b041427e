//! Microscopic fields in one cell from the macroscopic solution, by the
//! truncated two-scale expansion.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fem::element::{local_index, n_local};
use crate::macro_solver::{MacroState, MacroSystem};
use crate::mesh::{CellMesh, Subdomain};
use crate::micro_cell::{sym_pairs, CorrectorSet};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReconstructError {
  #[error("point {x:?} is outside the porous region")]
  OutsidePorousRegion { x: [f64; 3] },
  #[error("cell and correctors have different dimensions")]
  DimensionMismatch,
}

/// Macroscopic data the expansion needs at the cell location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroPoint {
  pub x: [f64; 3],
  pub u: [f64; 3],
  /// `G_ij = ∂_j u_i`.
  pub grad_u: Mat,
  pub p: [f64; 2],
  pub grad_pf: [f64; 3],
  /// Volume force `f̂` driving the channel flow.
  pub force: [f64; 3],
}

impl MacroPoint {
  pub fn zero(dim: usize, x: [f64; 3]) -> Self {
    Self { x, u: [0.0; 3], grad_u: Mat::zeros(dim), p: [0.0; 2], grad_pf: [0.0; 3], force: [0.0; 3] }
  }

  /// Embeds a planar point in `dim` dimensions with zero out-of-plane strain.
  pub fn lift(mut self, dim: usize) -> Self {
    if dim > self.grad_u.dim {
      let mut g = Mat::zeros(dim);
      for i in 0..self.grad_u.dim {
        for j in 0..self.grad_u.dim {
          g.m[i][j] = self.grad_u.m[i][j];
        }
      }
      self.grad_u = g;
    }
    self
  }

  /// `f̂ − ∇p_f`.
  pub fn drive(&self) -> [f64; 3] {
    let mut d = [0.0; 3];
    for k in 0..3 {
      d[k] = self.force[k] - self.grad_pf[k];
    }
    d
  }
}

/// Reconstructed fields at the cell vertices; `None` where a field is undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFields {
  pub eps0: f64,
  pub center: [f64; 3],
  /// Physical positions `x + ε₀(y − y_c)`.
  pub positions: Vec<[f64; 3]>,
  pub u: Vec<Option<[f64; 3]>>,
  pub pf: Vec<Option<f64>>,
  pub pc: Vec<Option<f64>>,
  pub w: Vec<Option<[f64; 3]>>,
  /// Seepage velocity coefficients on the flow corrector map.
  pub w_coef: Vec<f64>,
}

/// Macroscopic data at `x` from the element containing it; no gradient recovery.
pub fn macro_point(sys: &MacroSystem, s: &MacroState, x: [f64; 3], force: [f64; 3]) -> Result<MacroPoint, ReconstructError> {
  let v = sys.point_values(s, &x).ok_or(ReconstructError::OutsidePorousRegion { x })?;
  Ok(MacroPoint { x, u: v.u, grad_u: v.grad_u, p: v.p, grad_pf: v.grad_pf, force })
}

/// Expands the macroscopic state at `at.x` over the cell.
pub fn reconstruct_fields(mesh: &CellMesh, corr: &CorrectorSet, at: &MacroPoint, eps0: f64) -> Result<CellFields, ReconstructError> {
  let dim = mesh.dim();
  if corr.dim != dim || at.grad_u.dim != dim {
    return Err(ReconstructError::DimensionMismatch);
  }
  let grid = &mesh.grid;
  let nv = grid.vertices.len();
  let mut lo = [f64::INFINITY; 3];
  let mut hi = [f64::NEG_INFINITY; 3];
  for v in &grid.vertices {
    for k in 0..dim {
      lo[k] = lo[k].min(v[k]);
      hi[k] = hi[k].max(v[k]);
    }
  }
  let mut center = [0.0; 3];
  for k in 0..dim {
    center[k] = 0.5 * (lo[k] + hi[k]);
  }
  let e = at.grad_u.sym();
  let drive = at.drive();
  let offset = |y: &[f64; 3]| {
    let mut d = [0.0; 3];
    for k in 0..dim {
      d[k] = eps0 * (y[k] - center[k]);
    }
    d
  };
  let positions: Vec<[f64; 3]> = grid
    .vertices
    .iter()
    .map(|y| {
      let d = offset(y);
      let mut x = at.x;
      for k in 0..dim {
        x[k] += d[k];
      }
      x
    })
    .collect();

  // Displacement fluctuation ω^{ij}e_ij − p_f ω^f − p_c ω^c on the solid map.
  let n = corr.u_map.n_free;
  let mut fluct = vec![0.0; n];
  for (m, &(i, j)) in sym_pairs(dim).iter().enumerate() {
    let w = if i == j { e.m[i][i] } else { e.m[i][j] + e.m[j][i] };
    for (f, o) in fluct.iter_mut().zip(&corr.strain[m]) {
      *f += w * o;
    }
  }
  for pore in 0..2 {
    for (f, o) in fluct.iter_mut().zip(&corr.pressure[pore]) {
      *f -= at.p[pore] * o;
    }
  }
  let mut u = vec![None; nv];
  for v in 0..nv {
    let Some(slots) = corr.u_map.node_slots(grid, v, 0) else { continue };
    let d = offset(&grid.vertices[v]);
    let mut val = at.u;
    for i in 0..dim {
      for j in 0..dim {
        val[i] += at.grad_u.m[i][j] * d[j];
      }
      val[i] += eps0 * corr.u_map.value(slots[i], &fluct);
    }
    u[v] = Some(val);
  }

  let st = &corr.stokes;
  let mut w_coef = vec![0.0; st.w_map.n_free];
  let mut pi_coef = vec![0.0; st.p_map.n_free];
  for k in 0..dim {
    for (a, b) in w_coef.iter_mut().zip(&st.psi[k]) {
      *a += drive[k] * b;
    }
    for (a, b) in pi_coef.iter_mut().zip(&st.pi[k]) {
      *a += drive[k] * b;
    }
  }
  let mut pf = vec![None; nv];
  let mut pc = vec![None; nv];
  let mut w = vec![None; nv];
  let corners = n_local(dim, 1);
  for el in 0..grid.n_elements() {
    let nodes = grid.element_nodes(el, 1);
    match mesh.tags[el] {
      Subdomain::FluidChannel(_) => {
        if let Some(ps) = st.p_map.element_slots(el) {
          for a in 0..corners {
            let v = nodes[a];
            let d = offset(&grid.vertices[v]);
            let affine: f64 = (0..dim).map(|k| at.grad_pf[k] * d[k]).sum();
            pf[v] = Some(at.p[0] + affine + eps0 * st.p_map.value(ps[a], &pi_coef));
          }
        }
        if let Some(ws) = st.w_map.element_slots(el) {
          for b in 0..n_local(dim, 2) {
            let li = local_index(dim, 2, b);
            if li.iter().take(dim).any(|&c| c == 1) {
              continue;
            }
            let a = li[0] / 2 + 2 * (li[1] / 2) + 4 * (li[2] / 2);
            let mut val = [0.0; 3];
            for i in 0..dim {
              val[i] = st.w_map.value(ws[b * dim + i], &w_coef);
            }
            w[nodes[a]] = Some(val);
          }
        }
      }
      Subdomain::FluidInclusion => {
        for &v in &nodes {
          pc[v] = Some(at.p[1]);
        }
      }
      _ => {}
    }
  }
  Ok(CellFields { eps0, center, positions, u, pf, pc, w, w_coef })
}

/// `⨍_Y w^ε` from the reconstructed seepage velocity.
pub fn mean_seepage(corr: &CorrectorSet, fields: &CellFields) -> [f64; 3] {
  let mut out = [0.0; 3];
  for (j, load) in corr.stokes.loads.iter().enumerate() {
    out[j] = load.iter().zip(&fields.w_coef).map(|(a, b)| a * b).sum();
  }
  out
}

#[cfg(test)]
mod tests {
  use super::*;
  use crate::homogenize::{evaluate, pore_divergence};
  use crate::materials::Materials;
  use crate::mesh::{build_cell_mesh, CellGeometrySpec};
  use crate::micro_cell::{solve_correctors, Pore};

  fn cell() -> (CellMesh, CorrectorSet, Materials) {
    let mesh = build_cell_mesh(&CellGeometrySpec::paper_like(2, 12)).unwrap();
    let mats = Materials::default();
    let corr = solve_correctors(&mesh, &mats).unwrap();
    (mesh, corr, mats)
  }

  #[test]
  fn zero_state_gives_zero_fields() {
    let (mesh, corr, _) = cell();
    let f = reconstruct_fields(&mesh, &corr, &MacroPoint::zero(2, [0.3, 0.1, 0.0]), 0.01).unwrap();
    assert!(f.u.iter().flatten().all(|v| v.iter().all(|c| *c == 0.0)));
    assert!(f.pf.iter().flatten().chain(f.pc.iter().flatten()).all(|v| *v == 0.0));
    assert!(f.w.iter().flatten().all(|v| v.iter().all(|c| *c == 0.0)));
    assert!(f.u.iter().any(Option::is_some) && f.pf.iter().any(Option::is_some) && f.w.iter().any(Option::is_some));
  }

  #[test]
  fn uniform_pressure_without_gradient_gives_no_flow() {
    let (mesh, corr, _) = cell();
    let mut at = MacroPoint::zero(2, [0.0; 3]);
    at.p = [2e5, 1e5];
    let f = reconstruct_fields(&mesh, &corr, &at, 0.01).unwrap();
    assert!(f.w.iter().flatten().all(|v| v.iter().all(|c| *c == 0.0)));
    assert!(f.pf.iter().flatten().all(|v| *v == 2e5));
    assert!(f.pc.iter().flatten().all(|v| *v == 1e5));
  }

  #[test]
  fn mean_seepage_is_the_darcy_flux() {
    let (mesh, corr, mats) = cell();
    let (h, _) = evaluate(&mesh, &corr, &mats);
    let mut at = MacroPoint::zero(2, [0.0; 3]);
    at.grad_pf = [-3e6, 1e6, 0.0];
    at.force = [2e5, 0.0, 0.0];
    let f = reconstruct_fields(&mesh, &corr, &at, 0.01).unwrap();
    let mean = mean_seepage(&corr, &f);
    let d = at.drive();
    for i in 0..2 {
      let darcy: f64 = (0..2).map(|j| h.k.m[i][j] * d[j]).sum();
      let scale = h.k.max_abs() * 3e6;
      assert!((mean[i] - darcy).abs() <= 1e-8 * scale, "{i}: {} vs {darcy}", mean[i]);
    }
  }

  #[test]
  fn inclusion_pressure_inflates_the_inclusion() {
    let (mesh, corr, _) = cell();
    let neg: Vec<f64> = corr.pressure[1].iter().map(|v| -v).collect();
    assert!(pore_divergence(&mesh, &corr, Pore::Inclusion, &neg) > 0.0);
  }

  #[test]
  fn displacement_is_periodic_up_to_the_affine_part() {
    let (mesh, corr, _) = cell();
    let mut at = MacroPoint::zero(2, [0.0; 3]);
    at.grad_u.m = [[1e-3, 2e-4, 0.0], [-1e-4, 5e-4, 0.0], [0.0; 3]];
    at.p = [1e5, 3e5];
    let eps = 0.01;
    let f = reconstruct_fields(&mesh, &corr, &at, eps).unwrap();
    for &(a, b, axis) in &mesh.periodic_pairs {
      let (Some(ua), Some(ub)) = (f.u[a], f.u[b]) else { continue };
      for i in 0..2 {
        let jump = eps * at.grad_u.m[i][axis] * (mesh.grid.vertices[b][axis] - mesh.grid.vertices[a][axis]);
        assert!((ub[i] - ua[i] - jump).abs() < 1e-15, "{a} {b}");
      }
    }
  }

  #[test]
  fn lifted_planar_point_has_no_out_of_plane_strain() {
    let mut at = MacroPoint::zero(2, [0.0; 3]);
    at.grad_u.m = [[1e-3, 2e-4, 0.0], [-1e-4, 5e-4, 0.0], [0.0; 3]];
    let lifted = at.clone().lift(3);
    assert_eq!(lifted.grad_u.dim, 3);
    assert_eq!(lifted.grad_u.m, at.grad_u.m);
    assert_eq!(at.clone().lift(2), at);
  }

  #[test]
  fn points_outside_the_cell_dimension_are_rejected() {
    let (mesh, corr, _) = cell();
    assert_eq!(reconstruct_fields(&mesh, &corr, &MacroPoint::zero(3, [0.0; 3]), 0.01), Err(ReconstructError::DimensionMismatch));
  }
}
