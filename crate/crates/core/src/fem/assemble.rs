//! Global assembly of the cell and macroscopic bilinear forms.
//!
//! Every form takes a `measure` argument: cell forms pass `|Y|` so that the
//! result is a cell average, macroscopic forms pass 1.

use alloc::vec;
use alloc::vec::Vec;

use super::dofmap::{DofMap, Slot};
use super::element::{local_index, ElementGeometry, FacetGeometry, QuadratureRule, Tabulation};
use super::sparse::{SparseMatrix, Triplets};
use crate::mesh::{Facet, Grid};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FemError {
  #[error("material tensor lacks major symmetry")]
  NonSymmetricInput,
  #[error("negative membrane permeability {0}")]
  NegativePermeability(f64),
  #[error("pressure map has no compartment discontinuity")]
  DofMapMismatch,
}

/// Membrane permeability `κ̂_f`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Permeability {
  Finite(f64),
  /// Intact channel: no membrane terms.
  Infinite,
}

/// Quadrature rule with `Q1` geometry and field tabulations.
#[derive(Clone, Debug)]
pub struct QuadSet {
  pub rule: QuadratureRule,
  pub geo: Tabulation,
  pub q1: Tabulation,
  pub q2: Tabulation,
}

impl QuadSet {
  pub fn new(dim: usize, n: usize) -> Self {
    let rule = QuadratureRule::gauss(dim, n);
    let geo = Tabulation::new(dim, 1, &rule);
    let q2 = Tabulation::new(dim, 2, &rule);
    Self { q1: geo.clone(), geo, q2, rule }
  }

  pub fn face(dim: usize, n: usize, axis: usize, side: usize) -> Self {
    let rule = QuadratureRule::face(dim, n, axis, side);
    let geo = Tabulation::new(dim, 1, &rule);
    let q2 = Tabulation::new(dim, 2, &rule);
    Self { q1: geo.clone(), geo, q2, rule }
  }

  pub fn tab(&self, order: usize) -> &Tabulation {
    if order == 1 {
      &self.q1
    } else {
      &self.q2
    }
  }

  pub fn geometry(&self, grid: &Grid, e: usize) -> ElementGeometry {
    ElementGeometry::new(grid.dim, &grid.element_vertex_coords(e), &self.rule, &self.geo)
  }
}

/// Physical gradients of all basis functions at every point: `[q][a]`.
pub fn phys_grads(geom: &ElementGeometry, tab: &Tabulation) -> Vec<Vec<[f64; 3]>> {
  (0..geom.jxw.len()).map(|q| (0..tab.n_basis).map(|a| geom.phys_grad(q, tab.grad(q, a))).collect()).collect()
}

/// Adds element matrices over `elems`; only free-by-free entries are kept.
pub fn assemble_matrix(rows: &DofMap, cols: &DofMap, elems: &[usize], mut local: impl FnMut(usize, &mut [f64])) -> SparseMatrix {
  let nr = rows.n_local() * rows.ncomp;
  let nc = cols.n_local() * cols.ncomp;
  let mut t = Triplets::new(rows.n_free, cols.n_free);
  let mut buf = vec![0.0; nr * nc];
  for &e in elems {
    let (Some(rs), Some(cs)) = (rows.element_slots(e), cols.element_slots(e)) else { continue };
    buf.iter_mut().for_each(|v| *v = 0.0);
    local(e, &mut buf);
    for (i, &r) in rs.iter().enumerate() {
      let Slot::Free(r) = r else { continue };
      for (j, &c) in cs.iter().enumerate() {
        if let Slot::Free(c) = c {
          let v = buf[i * nc + j];
          if v != 0.0 {
            t.push(r, c, v);
          }
        }
      }
    }
  }
  t.to_csr()
}

/// Adds element vectors over `elems` into the free unknowns.
pub fn assemble_vector(rows: &DofMap, elems: &[usize], mut local: impl FnMut(usize, &mut [f64])) -> Vec<f64> {
  let nr = rows.n_local() * rows.ncomp;
  let mut out = vec![0.0; rows.n_free];
  let mut buf = vec![0.0; nr];
  for &e in elems {
    let Some(rs) = rows.element_slots(e) else { continue };
    buf.iter_mut().for_each(|v| *v = 0.0);
    local(e, &mut buf);
    for (i, &r) in rs.iter().enumerate() {
      if let Slot::Free(r) = r {
        out[r] += buf[i];
      }
    }
  }
  out
}

/// Element matrix of `∫ e(v) : T e(u)` for a vector `Q_order` field, node-major.
pub fn tensor_form_local(dim: usize, geom: &ElementGeometry, tab: &Tabulation, t: &Tensor4, scale: f64, out: &mut [f64]) {
  let nb = tab.n_basis;
  let w = nb * dim;
  for q in 0..geom.jxw.len() {
    let jxw = geom.jxw[q] * scale;
    let g: Vec<[f64; 3]> = (0..nb).map(|a| geom.phys_grad(q, tab.grad(q, a))).collect();
    for a in 0..nb {
      for i in 0..dim {
        for b in 0..nb {
          for k in 0..dim {
            let mut s = 0.0;
            for j in 0..dim {
              for l in 0..dim {
                s += g[a][j] * t.t[i][j][k][l] * g[b][l];
              }
            }
            out[(a * dim + i) * w + b * dim + k] += jxw * s;
          }
        }
      }
    }
  }
}

/// `a(u, v) = ⨍ e(v) : A e(u)` on `Q1` displacements.
pub fn assemble_elasticity(grid: &Grid, map: &DofMap, tensor: impl Fn(usize) -> Tensor4, measure: f64) -> Result<SparseMatrix, FemError> {
  let quad = QuadSet::new(grid.dim, 2);
  let mut bad = false;
  let k = assemble_matrix(map, map, &map.elements, |e, out| {
    let t = tensor(e);
    if t.major_asymmetry() > 1e-12 * t.max_abs() {
      bad = true;
    }
    let geom = quad.geometry(grid, e);
    tensor_form_local(grid.dim, &geom, quad.tab(map.order), &t, 1.0 / measure, out);
  });
  if bad {
    return Err(FemError::NonSymmetricInput);
  }
  Ok(k)
}

/// Viscous form `⨍ e(θ) : D e(w)` plus the membrane term `∮ κ̂⁻¹ (w·n)(θ·n)`
/// when the permeability is finite and positive.
pub fn assemble_stokes_viscosity(
  grid: &Grid,
  map: &DofMap,
  visc: &Tensor4,
  membranes: &[Facet],
  kappa: Permeability,
  measure: f64,
) -> Result<SparseMatrix, FemError> {
  if let Permeability::Finite(k) = kappa {
    if k < 0.0 || k.is_nan() {
      return Err(FemError::NegativePermeability(k));
    }
  }
  let dim = grid.dim;
  let quad = QuadSet::new(dim, map.order + 1);
  let vol = assemble_matrix(map, map, &map.elements, |e, out| {
    let geom = quad.geometry(grid, e);
    tensor_form_local(dim, &geom, quad.tab(map.order), visc, 1.0 / measure, out);
  });
  let Permeability::Finite(k) = kappa else { return Ok(vol) };
  if k == 0.0 || membranes.is_empty() {
    return Ok(vol);
  }
  let mut t = Triplets::new(map.n_free, map.n_free);
  t.push_block(0, 0, 1.0, &vol);
  let nb = map.n_local();
  for f in membranes {
    let fq = QuadSet::face(dim, map.order + 1, f.axis, f.side);
    let fg = FacetGeometry::new(dim, &grid.element_vertex_coords(f.elem), f.axis, f.side, &fq.rule, &fq.geo);
    let slots = map.element_slots(f.elem).expect("membrane facet outside velocity map");
    let tab = fq.tab(map.order);
    for q in 0..fq.rule.len() {
      let n = fg.normal[q];
      let wq = fg.sxw[q] / (k * measure);
      for a in 0..nb {
        for i in 0..dim {
          let Slot::Free(r) = slots[a * dim + i] else { continue };
          for b in 0..nb {
            for j in 0..dim {
              let Slot::Free(c) = slots[b * dim + j] else { continue };
              let v = wq * tab.val(q, a) * n[i] * tab.val(q, b) * n[j];
              if v != 0.0 {
                t.push(r, c, v);
              }
            }
          }
        }
      }
    }
  }
  Ok(t.to_csr())
}

/// Local face nodes of face `(axis, side)` in tangential order.
pub fn face_locals(dim: usize, order: usize, axis: usize, side: usize) -> Vec<usize> {
  (0..super::element::n_local(dim, order)).filter(|&a| local_index(dim, order, a)[axis] == side * order).collect()
}

/// Slots on both sides of a membrane facet: `(minus side, plus side)` per face node.
pub fn membrane_face_slots(grid: &Grid, map: &DofMap, f: &Facet) -> Vec<(Slot, Slot)> {
  let other = grid.neighbor(f.elem, f.axis, f.side, &map.periodic).expect("membrane facet on the boundary");
  let mine = face_locals(grid.dim, map.order, f.axis, f.side);
  let theirs = face_locals(grid.dim, map.order, f.axis, 1 - f.side);
  let sm = map.element_slots(f.elem).expect("membrane facet outside pressure map");
  let st = map.element_slots(other).expect("membrane facet outside pressure map");
  mine.iter().zip(&theirs).map(|(&a, &b)| (sm[a * map.ncomp], st[b * map.ncomp])).collect()
}

/// Jump form `∮ κ̂ ⟦π⟧⟦q⟧` with `⟦π⟧ = π_{k+1} − π_k`.
pub fn assemble_pressure_jump(grid: &Grid, map: &DofMap, membranes: &[Facet], kappa: f64, measure: f64) -> Result<SparseMatrix, FemError> {
  if kappa < 0.0 || kappa.is_nan() {
    return Err(FemError::NegativePermeability(kappa));
  }
  if !map.discontinuous {
    return Err(FemError::DofMapMismatch);
  }
  let dim = grid.dim;
  let mut t = Triplets::new(map.n_free, map.n_free);
  for f in membranes {
    let fq = QuadSet::face(dim, 2, f.axis, f.side);
    let fg = FacetGeometry::new(dim, &grid.element_vertex_coords(f.elem), f.axis, f.side, &fq.rule, &fq.geo);
    let pairs = membrane_face_slots(grid, map, f);
    let locals = face_locals(dim, 1, f.axis, f.side);
    // Jump basis: +φ on the plus side, −φ on the minus side.
    let mut basis: Vec<(Slot, usize, f64)> = Vec::new();
    for (m, &(minus, plus)) in pairs.iter().enumerate() {
      basis.push((minus, locals[m], -1.0));
      basis.push((plus, locals[m], 1.0));
    }
    for q in 0..fq.rule.len() {
      let wq = kappa * fg.sxw[q] / measure;
      for &(sa, a, ca) in &basis {
        let Slot::Free(r) = sa else { continue };
        for &(sb, b, cb) in &basis {
          let Slot::Free(c) = sb else { continue };
          t.push(r, c, wq * ca * cb * fq.q1.val(q, a) * fq.q1.val(q, b));
        }
      }
    }
  }
  Ok(t.to_csr())
}

/// Mixed form `⨍ ∇q · w`; rows are pressure unknowns, columns velocity unknowns.
pub fn assemble_divergence(grid: &Grid, pmap: &DofMap, wmap: &DofMap, measure: f64) -> SparseMatrix {
  let dim = grid.dim;
  let quad = QuadSet::new(dim, wmap.order + 1);
  let nw = wmap.n_local() * dim;
  assemble_matrix(pmap, wmap, &pmap.elements, |e, out| {
    let geom = quad.geometry(grid, e);
    let tp = quad.tab(pmap.order);
    let tw = quad.tab(wmap.order);
    for q in 0..quad.rule.len() {
      let jxw = geom.jxw[q] / measure;
      for a in 0..tp.n_basis {
        let g = geom.phys_grad(q, tp.grad(q, a));
        for b in 0..tw.n_basis {
          let v = tw.val(q, b) * jxw;
          for i in 0..dim {
            out[a * nw + b * dim + i] += g[i] * v;
          }
        }
      }
    }
  })
}

/// Scalar mass form `∫ c p q`.
pub fn assemble_mass(grid: &Grid, map: &DofMap, coeff: impl Fn(usize) -> f64, measure: f64) -> SparseMatrix {
  let quad = QuadSet::new(grid.dim, map.order + 1);
  let nb = map.n_local();
  assemble_matrix(map, map, &map.elements, |e, out| {
    let geom = quad.geometry(grid, e);
    let tab = quad.tab(map.order);
    let c = coeff(e);
    for q in 0..quad.rule.len() {
      let jxw = c * geom.jxw[q] / measure;
      for a in 0..nb {
        for b in 0..nb {
          out[a * nb + b] += jxw * tab.val(q, a) * tab.val(q, b);
        }
      }
    }
  })
}

#[cfg(test)]
mod tests {
  use super::*;
  use crate::fem::dofmap::DofMapSpec;
  use crate::mesh::{build_cell_mesh, CellGeometrySpec, Subdomain};

  fn full_map(grid: &Grid, order: usize, ncomp: usize, periodic: [bool; 3]) -> DofMap {
    let elems: Vec<usize> = (0..grid.n_elements()).collect();
    DofMap::new(grid, &DofMapSpec { order, ncomp, elements: &elems, periodic, split: None, fixed: None })
  }

  #[test]
  fn rigid_motions_in_elastic_kernel() {
    let g = Grid::uniform(2, 3);
    let map = full_map(&g, 1, 2, [false; 3]);
    let k = assemble_elasticity(&g, &map, |_| Tensor4::from_young_poisson(2, 1.0, 0.3), 1.0).unwrap();
    assert!(k.is_symmetric(1e-13));
    let mut rot = vec![0.0; map.n_free];
    for (&(n, _), s) in map.nodes() {
      let x = g.vertices[n];
      if let (Slot::Free(a), Slot::Free(b)) = (s[0], s[1]) {
        rot[a] = -x[1];
        rot[b] = x[0];
      }
    }
    assert!(k.mul_vec(&rot).iter().all(|v| v.abs() < 1e-12));
  }

  #[test]
  fn uniaxial_strain_energy() {
    // Affine u = (x, 0) on the unit square: energy density C_1111.
    let g = Grid::uniform(2, 4);
    let map = full_map(&g, 1, 2, [false; 3]);
    let c = Tensor4::from_young_poisson(2, 2.0, 0.25);
    let k = assemble_elasticity(&g, &map, |_| c, 1.0).unwrap();
    let mut u = vec![0.0; map.n_free];
    for (&(n, _), s) in map.nodes() {
      if let Slot::Free(a) = s[0] {
        u[a] = g.vertices[n][0];
      }
    }
    assert!((k.bilinear(&u, &u) - c.get(0, 0, 0, 0)).abs() < 1e-12);
  }

  #[test]
  fn nonsymmetric_tensor_rejected() {
    let g = Grid::uniform(2, 2);
    let map = full_map(&g, 1, 2, [false; 3]);
    let mut c = Tensor4::from_young_poisson(2, 1.0, 0.3);
    c.t[0][0][1][1] += 0.1;
    assert_eq!(assemble_elasticity(&g, &map, |_| c, 1.0), Err(FemError::NonSymmetricInput));
  }

  #[test]
  fn divergence_annihilates_constants() {
    let g = Grid::uniform(2, 3);
    let p = full_map(&g, 1, 1, [true, true, false]);
    let w = full_map(&g, 2, 2, [true, true, false]);
    let b = assemble_divergence(&g, &p, &w, 1.0);
    let bt = b.transpose();
    assert!(bt.mul_vec(&vec![1.0; p.n_free]).iter().all(|v| v.abs() < 1e-13));
  }

  fn two_membrane_cell() -> CellMesh {
    let spec = CellGeometrySpec {
      dim: 2,
      resolution: 8,
      channel_radius: 0.25,
      inclusion_radius: 0.0,
      stiff_shell_thickness: 0.0,
      n_compartments: 3,
      membrane_positions: vec![0.25, 0.75],
      channel_axes: vec![0],
    };
    build_cell_mesh(&spec).unwrap()
  }
  use crate::mesh::CellMesh;

  fn split_pressure(m: &CellMesh) -> DofMap {
    let elems: Vec<usize> = (0..m.tags.len()).filter(|&e| m.tags[e].is_channel()).collect();
    let split = |e: usize, node: usize| -> usize {
      let c = m.grid.lattice_coords(1, node);
      if m.membranes.iter().any(|mb| mb.plane == c[mb.axis]) {
        match m.tags[e] {
          Subdomain::FluidChannel(k) => k,
          _ => 0,
        }
      } else {
        0
      }
    };
    DofMap::new(&m.grid, &DofMapSpec { order: 1, ncomp: 1, elements: &elems, periodic: [true, true, false], split: Some(&split), fixed: None })
  }

  #[test]
  fn jump_form_of_compartment_constants() {
    let m = two_membrane_cell();
    let p = split_pressure(&m);
    let j = assemble_pressure_jump(&m.grid, &p, &m.facets.membrane, 1.0, 1.0).unwrap();
    let mut pi = vec![0.0; p.n_free];
    for e in &p.elements {
      let val = if m.tags[*e] == Subdomain::FluidChannel(1) { 1.0 } else { -1.0 };
      for s in p.element_slots(*e).unwrap() {
        if let Slot::Free(i) = s {
          pi[*i] = val;
        }
      }
    }
    let gamma: f64 = 2.0 * 0.5;
    assert!((j.bilinear(&pi, &pi) - 4.0 * gamma).abs() < 1e-12);
    assert!(j.mul_vec(&vec![1.0; p.n_free]).iter().all(|v| v.abs() < 1e-13));
    assert_eq!(assemble_pressure_jump(&m.grid, &p, &m.facets.membrane, -1.0, 1.0), Err(FemError::NegativePermeability(-1.0)));
    let cont = full_map(&m.grid, 1, 1, [true, true, false]);
    assert_eq!(assemble_pressure_jump(&m.grid, &cont, &m.facets.membrane, 1.0, 1.0), Err(FemError::DofMapMismatch));
  }
}
