//! Shape sensitivities of the effective coefficients and the tangent
//! coefficients of the deformation-dependent macroscopic model.
//!
//! Derivatives follow the domain method: the cell is transported by
//! `y ↦ y + τ 𝒱(y)` with `𝒱` a nodal `Q1` field, and every cell integral is
//! differentiated at `τ = 0` with the state equations eliminating the
//! corrector variations. Evaluated with the discrete correctors these
//! formulas are the exact derivatives of the discrete coefficients.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fem::assemble::{assemble_matrix, assemble_vector, face_locals, membrane_face_slots, QuadSet};
use crate::fem::element::FacetGeometry;
use crate::fem::{DofMap, DofMapSpec, LuFactor, Permeability, Slot};
use crate::homogenize::{restrict2, restrict4, HomogenizedCoefficients};
use crate::materials::{CompressibilityIndex, Materials};
use crate::mesh::{CellMesh, Grid};
use crate::micro_cell::{gather_extended, local_gradients, pair_index, sym_pairs, CellError, CorrectorSet, Pore};
use crate::tensor::{Mat, Tensor4};

/// Origin of a design velocity field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VelocityKind {
  /// `ω^{ij} + sym Π^{ij}`.
  StrainMode(usize, usize),
  /// `−ω^P`.
  PressureMode(Pore),
  Custom,
}

/// Vertex field `𝒱` transporting the cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignVelocity {
  pub kind: VelocityKind,
  /// One vector per grid vertex.
  pub nodal: Vec<[f64; 3]>,
}

impl DesignVelocity {
  pub fn custom(nodal: Vec<[f64; 3]>) -> Self {
    Self { kind: VelocityKind::Custom, nodal }
  }

  pub fn zero(mesh: &CellMesh) -> Self {
    Self::custom(vec![[0.0; 3]; mesh.grid.vertices.len()])
  }

  /// Equal values on periodically paired vertices.
  pub fn is_periodic(&self, mesh: &CellMesh) -> bool {
    let scale = self.nodal.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    mesh.periodic_pairs.iter().all(|&(a, b, _)| (0..3).all(|i| (self.nodal[a][i] - self.nodal[b][i]).abs() <= 1e-12 * scale))
  }
}

/// Vertex values of a solid displacement, extended harmonically into the pores.
pub fn extend_into_pores(mesh: &CellMesh, map: &DofMap, x: &[f64]) -> Result<Vec<[f64; 3]>, CellError> {
  let grid = &mesh.grid;
  let dim = mesh.dim();
  let nv = grid.vertices.len();
  let mut out = vec![[0.0; 3]; nv];
  let mut known = vec![false; nv];
  for v in 0..nv {
    if let Some(s) = map.node_slots(grid, v, 0) {
      for i in 0..dim {
        out[v][i] = map.value(s[i], x);
      }
      known[v] = true;
    }
  }
  let pores: Vec<usize> = (0..mesh.tags.len()).filter(|&e| !mesh.tags[e].is_solid()).collect();
  if pores.is_empty() || known.iter().all(|&k| k) {
    return Ok(out);
  }
  let periodic = mesh.periodic_axes();
  let solid_value = |canon: usize, comp: usize| -> Option<f64> {
    map.node_slots(grid, canon, 0).map(|s| map.value(s[comp], x))
  };
  let fix = |canon: usize, _key: usize, _c: usize| solid_value(canon, 0).map(|_| 0.0);
  let mut pmap = DofMap::new(grid, &DofMapSpec { order: 1, ncomp: 1, elements: &pores, periodic, split: None, fixed: Some(&fix) });
  if pmap.n_free > 0 {
    let quad = QuadSet::new(dim, 2);
    let laplace_local = |e: usize| -> Vec<f64> {
      let geom = quad.geometry(grid, e);
      let nb = quad.q1.n_basis;
      let mut k = vec![0.0; nb * nb];
      for q in 0..quad.rule.len() {
        let g: Vec<[f64; 3]> = (0..nb).map(|a| geom.phys_grad(q, quad.q1.grad(q, a))).collect();
        for a in 0..nb {
          for b in 0..nb {
            k[a * nb + b] += geom.jxw[q] * (0..dim).map(|i| g[a][i] * g[b][i]).sum::<f64>();
          }
        }
      }
      k
    };
    let matrix = assemble_matrix(&pmap, &pmap, &pores, |e, out| out.copy_from_slice(&laplace_local(e)));
    let lu = LuFactor::new(&matrix, &[])?;
    for comp in 0..dim {
      let keys = pmap.fixed_keys.clone();
      for (k, &(canon, _, _)) in keys.iter().enumerate() {
        pmap.fixed_values[k] = solid_value(canon, comp).unwrap_or(0.0);
      }
      let rhs = assemble_vector(&pmap, &pores, |e, out| {
        let k = laplace_local(e);
        let slots = pmap.element_slots(e).unwrap();
        let nb = slots.len();
        for b in 0..nb {
          if let Slot::Fixed(_) = slots[b] {
            let v = pmap.value(slots[b], &[]);
            for a in 0..nb {
              out[a] -= k[a * nb + b] * v;
            }
          }
        }
      });
      let sol = lu.solve(&rhs)?;
      for v in 0..nv {
        if !known[v] {
          if let Some(s) = pmap.node_slots(grid, v, 0) {
            out[v][comp] = pmap.value(s[0], &sol);
          }
        }
      }
    }
  }
  Ok(out)
}

/// `𝒱 = ω^{ij} + sym Π^{ij}` with `ω^{ij}` extended into the pores.
pub fn strain_mode(mesh: &CellMesh, corr: &CorrectorSet, i: usize, j: usize) -> Result<DesignVelocity, CellError> {
  let mut nodal = extend_into_pores(mesh, &corr.u_map, corr.omega(i, j))?;
  let e = Mat::sym_unit(mesh.dim(), i, j);
  for (v, y) in nodal.iter_mut().zip(&mesh.grid.vertices) {
    let p = e.mul_vec(y);
    for k in 0..3 {
      v[k] += p[k];
    }
  }
  Ok(DesignVelocity { kind: VelocityKind::StrainMode(i.min(j), i.max(j)), nodal })
}

/// `𝒱 = −ω^P` extended into the pores.
pub fn pressure_mode(mesh: &CellMesh, corr: &CorrectorSet, pore: Pore) -> Result<DesignVelocity, CellError> {
  let mut nodal = extend_into_pores(mesh, &corr.u_map, &corr.pressure[pore as usize])?;
  for v in nodal.iter_mut() {
    for c in v.iter_mut() {
      *c = -*c;
    }
  }
  Ok(DesignVelocity { kind: VelocityKind::PressureMode(pore), nodal })
}

/// Shape derivative `δ_sh H ∘ 𝒱` of every coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeDerivative {
  pub a: Tensor4,
  pub b: [Mat; 2],
  pub m: [[f64; 2]; 2],
  pub k: Mat,
  pub phi: [f64; 2],
}

impl ShapeDerivative {
  pub fn zeros(dim: usize) -> Self {
    Self { a: Tensor4::zeros(dim), b: [Mat::zeros(dim); 2], m: [[0.0; 2]; 2], k: Mat::zeros(dim), phi: [0.0; 2] }
  }

  pub fn add_scaled(&mut self, w: f64, o: &ShapeDerivative) {
    if w == 0.0 {
      return;
    }
    self.a = self.a.axpy(w, &o.a);
    for p in 0..2 {
      self.b[p] = self.b[p].axpy(w, &o.b[p]);
      self.phi[p] += w * o.phi[p];
      for q in 0..2 {
        self.m[p][q] += w * o.m[p][q];
      }
    }
    self.k = self.k.axpy(w, &o.k);
  }

  pub fn restrict(&self, dim: usize) -> Self {
    Self { a: restrict4(&self.a, dim), b: [restrict2(&self.b[0], dim), restrict2(&self.b[1], dim)], m: self.m, k: restrict2(&self.k, dim), phi: self.phi }
  }

  pub fn max_abs(&self) -> f64 {
    let mut s = self.a.max_abs().max(self.k.max_abs());
    for p in 0..2 {
      s = s.max(self.b[p].max_abs()).max(self.phi[p].abs());
      for q in 0..2 {
        s = s.max(self.m[p][q].abs());
      }
    }
    s
  }
}

fn vertex_local(grid: &Grid, v: &[[f64; 3]], e: usize) -> Vec<f64> {
  let dim = grid.dim;
  let mut out = Vec::with_capacity(grid.element_nodes(e, 1).len() * dim);
  for n in grid.element_nodes(e, 1) {
    out.extend_from_slice(&v[n][..dim]);
  }
  out
}

/// `∫ f` and its derivative turned into a cell average and its derivative.
fn averaged(raw: f64, draw: f64, vol: f64, dvol: f64) -> f64 {
  draw / vol - raw * dvol / (vol * vol)
}

/// Symmetric part of `−G W`, the variation of a transported displacement gradient.
#[inline]
fn transported(g: &Mat, w: &Mat) -> Mat {
  g.matmul(w).scale(-1.0)
}

/// `δ|Y| = ∫_Y ∇·𝒱`.
pub fn volume_derivative(mesh: &CellMesh, v: &DesignVelocity) -> f64 {
  let dim = mesh.dim();
  let quad = QuadSet::new(dim, 2);
  let mut s = 0.0;
  for e in 0..mesh.tags.len() {
    let geom = quad.geometry(&mesh.grid, e);
    let w = local_gradients(dim, &geom, &quad.q1, &vertex_local(&mesh.grid, &v.nodal, e));
    for q in 0..quad.rule.len() {
      s += geom.jxw[q] * w[q].trace();
    }
  }
  s
}

/// Shape derivatives of all coefficients along `v`.
pub fn shape_derivative(mesh: &CellMesh, mats: &Materials, corr: &CorrectorSet, v: &DesignVelocity) -> ShapeDerivative {
  let dim = mesh.dim();
  let grid = &mesh.grid;
  let pairs = sym_pairs(dim);
  let ns = pairs.len();
  let quad = QuadSet::new(dim, 2);

  // Fields: strain correctors with their affine strain, then pressure correctors.
  let mut fields: Vec<(&[f64], Mat)> = Vec::with_capacity(ns + 2);
  for (pa, &(i, j)) in pairs.iter().enumerate() {
    fields.push((&corr.strain[pa], Mat::sym_unit(dim, i, j)));
  }
  for p in 0..2 {
    fields.push((&corr.pressure[p], Mat::zeros(dim)));
  }
  let nf = fields.len();

  let mut vol = 0.0;
  let mut dvol = 0.0;
  let mut pore_vol = [0.0; 2];
  let mut dpore_vol = [0.0; 2];
  let mut en = vec![vec![0.0; nf]; nf];
  let mut den = vec![vec![0.0; nf]; nf];
  let mut div = [vec![0.0; nf], vec![0.0; nf]];
  let mut ddiv = [vec![0.0; nf], vec![0.0; nf]];

  for e in 0..mesh.tags.len() {
    let tag = mesh.tags[e];
    let geom = quad.geometry(grid, e);
    let w = local_gradients(dim, &geom, &quad.q1, &vertex_local(grid, &v.nodal, e));
    for q in 0..quad.rule.len() {
      vol += geom.jxw[q];
      dvol += geom.jxw[q] * w[q].trace();
    }
    if tag.is_solid() {
      let c = mats.solid_tensor(dim, tag);
      let grads: Vec<Vec<Mat>> = fields.iter().map(|(x, _)| local_gradients(dim, &geom, &quad.q1, &corr.u_map.gather(e, x))).collect();
      for q in 0..quad.rule.len() {
        let jxw = geom.jxw[q];
        let tw = w[q].trace();
        let full: Vec<Mat> = (0..nf).map(|f| grads[f][q].add(&fields[f].1).sym()).collect();
        let dfull: Vec<Mat> = (0..nf).map(|f| transported(&grads[f][q], &w[q]).sym()).collect();
        let stress: Vec<Mat> = full.iter().map(|g| c.ddot(g)).collect();
        for f in 0..nf {
          let dstress = c.ddot(&dfull[f]);
          for g in f..nf {
            let val = full[g].ddot(&stress[f]);
            let dv = dfull[g].ddot(&stress[f]) + full[g].ddot(&dstress) + val * tw;
            en[f][g] += jxw * val;
            den[f][g] += jxw * dv;
          }
        }
      }
    } else {
      let pore = if tag.is_channel() { 0 } else { 1 };
      for q in 0..quad.rule.len() {
        pore_vol[pore] += geom.jxw[q];
        dpore_vol[pore] += geom.jxw[q] * w[q].trace();
      }
      for (f, (x, _)) in fields.iter().enumerate() {
        let g = local_gradients(dim, &geom, &quad.q1, &gather_extended(grid, &corr.u_map, e, x));
        for q in 0..quad.rule.len() {
          let tr = g[q].trace();
          div[pore][f] += geom.jxw[q] * tr;
          ddiv[pore][f] += geom.jxw[q] * (transported(&g[q], &w[q]).trace() + tr * w[q].trace());
        }
      }
    }
  }

  let d_en = |f: usize, g: usize| {
    let (a, b) = if f <= g { (f, g) } else { (g, f) };
    averaged(en[a][b], den[a][b], vol, dvol)
  };
  // Derivative of `⨍_{Y_P} ∇·x̃` for field `f`.
  let d_div = |p: usize, f: usize| averaged(div[p][f], ddiv[p][f], vol, dvol);
  let dphi = [averaged(pore_vol[0], dpore_vol[0], vol, dvol), averaged(pore_vol[1], dpore_vol[1], vol, dvol)];

  let mut out = ShapeDerivative::zeros(dim);
  out.phi = dphi;
  for (pa, &(i, j)) in pairs.iter().enumerate() {
    for (pb, &(k, l)) in pairs.iter().enumerate() {
      let val = d_en(pa, pb);
      for (x, y) in [(i, j), (j, i)] {
        for (z, w) in [(k, l), (l, k)] {
          out.a.t[z][w][x][y] = val;
        }
      }
    }
  }
  for p in 0..2 {
    for (pa, &(i, j)) in pairs.iter().enumerate() {
      let d = if i == j { dphi[p] } else { 0.0 };
      let val = d_en(ns + p, pa) + d_div(p, pa) + d;
      out.b[p].m[i][j] = val;
      out.b[p].m[j][i] = val;
    }
  }
  for p in 0..2 {
    for q in 0..2 {
      let g = if p == q {
        match mats.compressibility_index {
          CompressibilityIndex::PerPore => mats.gamma * dphi[p],
          CompressibilityIndex::ChannelOnly => mats.gamma * dphi[0],
        }
      } else {
        0.0
      };
      out.m[p][q] = -d_en(ns + p, ns + q) - d_div(q, ns + p) - d_div(p, ns + q) + g;
    }
  }
  out.k = permeability_derivative(mesh, corr, v, vol, dvol);
  out
}

/// `δK_ij = δℓ_j(ψ^i) + δℓ_i(ψ^j) − δ𝒜((ψ^i, π^i), (ψ^j, π^j))` for the
/// symmetric saddle form `𝒜 = a_f(w, θ) + b(p, θ) + b(q, w) − j(p, q)`,
/// `b(q, w) = ⨍ ∇q·w`, `j(p, q) = ∮ κ̂ ⟦p⟧⟦q⟧`.
fn permeability_derivative(mesh: &CellMesh, corr: &CorrectorSet, v: &DesignVelocity, vol: f64, dvol: f64) -> Mat {
  let s = &corr.stokes;
  let dim = mesh.dim();
  let grid = &mesh.grid;
  let mut out = Mat::zeros(dim);
  if s.w_map.n_free == 0 {
    return out;
  }
  let visc = Tensor4::viscous(dim, s.mu_bar);
  let quad = QuadSet::new(dim, 3);
  // Raw integrals and their derivatives, indexed [i][j].
  let mut load = [[0.0; 3]; 3];
  let mut dload = [[0.0; 3]; 3];
  let mut form = [[0.0; 3]; 3];
  let mut dform = [[0.0; 3]; 3];
  for &e in &s.w_map.elements {
    let geom = quad.geometry(grid, e);
    let w = local_gradients(dim, &geom, &quad.q1, &vertex_local(grid, &v.nodal, e));
    let psi: Vec<Vec<f64>> = (0..dim).map(|k| s.w_map.gather(e, &s.psi[k])).collect();
    let pi: Vec<Vec<f64>> = (0..dim).map(|k| s.p_map.gather(e, &s.pi[k])).collect();
    let gpsi: Vec<Vec<Mat>> = psi.iter().map(|x| local_gradients(dim, &geom, &quad.q2, x)).collect();
    for q in 0..quad.rule.len() {
      let jxw = geom.jxw[q];
      let tw = w[q].trace();
      let val: Vec<[f64; 3]> = psi
        .iter()
        .map(|x| {
          let mut u = [0.0; 3];
          for b in 0..quad.q2.n_basis {
            for c in 0..dim {
              u[c] += quad.q2.val(q, b) * x[b * dim + c];
            }
          }
          u
        })
        .collect();
      let gp: Vec<[f64; 3]> = pi
        .iter()
        .map(|x| {
          let mut g = [0.0; 3];
          for a in 0..quad.q1.n_basis {
            let d = geom.phys_grad(q, quad.q1.grad(q, a));
            for c in 0..dim {
              g[c] += d[c] * x[a];
            }
          }
          g
        })
        .collect();
      // δ(∇q) = −Wᵀ ∇q.
      let dgp: Vec<[f64; 3]> = gp
        .iter()
        .map(|g| {
          let mut d = [0.0; 3];
          for k in 0..dim {
            for r in 0..dim {
              d[k] -= g[r] * w[q].m[r][k];
            }
          }
          d
        })
        .collect();
      let sym: Vec<Mat> = gpsi.iter().map(|g| g[q].sym()).collect();
      let dsym: Vec<Mat> = gpsi.iter().map(|g| transported(&g[q], &w[q]).sym()).collect();
      let dot = |a: &[f64; 3], b: &[f64; 3]| (0..dim).map(|c| a[c] * b[c]).sum::<f64>();
      for i in 0..dim {
        let stress = visc.ddot(&sym[i]);
        let dstress = visc.ddot(&dsym[i]);
        for j in 0..dim {
          load[i][j] += jxw * val[i][j];
          dload[i][j] += jxw * val[i][j] * tw;
          let a = sym[j].ddot(&stress);
          let da = dsym[j].ddot(&stress) + sym[j].ddot(&dstress) + a * tw;
          let b = dot(&gp[i], &val[j]) + dot(&gp[j], &val[i]);
          let db = dot(&dgp[i], &val[j]) + dot(&dgp[j], &val[i]) + b * tw;
          form[i][j] += jxw * (a + b);
          dform[i][j] += jxw * (da + db);
        }
      }
    }
  }
  let (blocked, kappa) = match s.kappa {
    Permeability::Finite(k) => (k == 0.0, k),
    Permeability::Infinite => (false, f64::INFINITY),
  };
  if kappa.is_finite() && !blocked {
    for f in &mesh.facets.membrane {
      // Viscous membrane term `∮ κ̂⁻¹ (w·n)(θ·n)`.
      let fq = QuadSet::face(dim, 3, f.axis, f.side);
      let verts = grid.element_vertex_coords(f.elem);
      let fg = FacetGeometry::new(dim, &verts, f.axis, f.side, &fq.rule, &fq.geo);
      let vloc = vertex_local(grid, &v.nodal, f.elem);
      let psi: Vec<Vec<f64>> = (0..dim).map(|k| s.w_map.gather(f.elem, &s.psi[k])).collect();
      for q in 0..fq.rule.len() {
        let (dn, divg) = facet_variation(dim, &fg, &fq, q, &vloc);
        let n = fg.normal[q];
        let vn: Vec<(f64, f64)> = psi
          .iter()
          .map(|x| {
            let mut u = [0.0; 3];
            for b in 0..fq.q2.n_basis {
              for c in 0..dim {
                u[c] += fq.q2.val(q, b) * x[b * dim + c];
              }
            }
            ((0..dim).map(|c| u[c] * n[c]).sum(), (0..dim).map(|c| u[c] * dn[c]).sum())
          })
          .collect();
        let sw = fg.sxw[q] / kappa;
        for i in 0..dim {
          for j in 0..dim {
            let t = vn[i].0 * vn[j].0;
            form[i][j] += sw * t;
            dform[i][j] += sw * (vn[i].1 * vn[j].0 + vn[i].0 * vn[j].1 + t * divg);
          }
        }
      }
      // Jump term enters `𝒜` with a minus sign.
      let fq = QuadSet::face(dim, 2, f.axis, f.side);
      let fg = FacetGeometry::new(dim, &verts, f.axis, f.side, &fq.rule, &fq.geo);
      let pairs = membrane_face_slots(grid, &s.p_map, f);
      let locals = face_locals(dim, 1, f.axis, f.side);
      for q in 0..fq.rule.len() {
        let (_, divg) = facet_variation(dim, &fg, &fq, q, &vloc);
        let jumps: Vec<f64> = (0..dim)
          .map(|k| {
            pairs
              .iter()
              .enumerate()
              .map(|(m, &(minus, plus))| fq.q1.val(q, locals[m]) * (s.p_map.value(plus, &s.pi[k]) - s.p_map.value(minus, &s.pi[k])))
              .sum()
          })
          .collect();
        let sw = kappa * fg.sxw[q];
        for i in 0..dim {
          for j in 0..dim {
            let t = jumps[i] * jumps[j];
            form[i][j] -= sw * t;
            dform[i][j] -= sw * t * divg;
          }
        }
      }
    }
  }
  for i in 0..dim {
    for j in 0..dim {
      let dl = averaged(load[i][j], dload[i][j], vol, dvol) + averaged(load[j][i], dload[j][i], vol, dvol);
      out.m[i][j] = dl - averaged(form[i][j], dform[i][j], vol, dvol);
    }
  }
  out
}

/// Normal variation and tangential divergence of `𝒱` at a facet point.
fn facet_variation(dim: usize, fg: &FacetGeometry, fq: &QuadSet, q: usize, vloc: &[f64]) -> ([f64; 3], f64) {
  let mut w = Mat::zeros(dim);
  for a in 0..fq.q1.n_basis {
    let d = fg.phys_grad(dim, q, fq.q1.grad(q, a));
    for i in 0..dim {
      for j in 0..dim {
        w.m[i][j] += vloc[a * dim + i] * d[j];
      }
    }
  }
  let n = fg.normal[q];
  // (Wᵀ n)_i = ∂_i 𝒱_k n_k.
  let mut wtn = [0.0; 3];
  for i in 0..dim {
    for k in 0..dim {
      wtn[i] += w.m[k][i] * n[k];
    }
  }
  let nwn: f64 = (0..dim).map(|i| wtn[i] * n[i]).sum();
  let mut dn = [0.0; 3];
  for i in 0..dim {
    dn[i] = -wtn[i] + nwn * n[i];
  }
  (dn, w.trace() - nwn)
}

/// Coefficient derivatives with respect to the macroscopic state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSensitivities {
  pub dim: usize,
  /// `δ_e H` per strain pair in Voigt order.
  pub strain: Vec<ShapeDerivative>,
  /// `δ_{p_f} H`, `δ_{p_c} H`.
  pub pressure: [ShapeDerivative; 2],
}

impl CoefficientSensitivities {
  pub fn zeros(dim: usize) -> Self {
    Self { dim, strain: vec![ShapeDerivative::zeros(dim); sym_pairs(dim).len()], pressure: [ShapeDerivative::zeros(dim), ShapeDerivative::zeros(dim)] }
  }

  /// `(δ_e H)_{ij}` for any index order.
  pub fn d_strain(&self, i: usize, j: usize) -> &ShapeDerivative {
    &self.strain[pair_index(self.dim, i, j)]
  }

  /// `∂_e H ∘ e + Σ_P ∂_{p_P} H p_P`.
  pub fn directional(&self, e: &Mat, p: [f64; 2]) -> ShapeDerivative {
    let mut out = ShapeDerivative::zeros(self.dim);
    for (pa, &(i, j)) in sym_pairs(self.dim).iter().enumerate() {
      let w = if i == j { e.m[i][i] } else { e.m[i][j] + e.m[j][i] };
      out.add_scaled(w, &self.strain[pa]);
    }
    for q in 0..2 {
      out.add_scaled(p[q], &self.pressure[q]);
    }
    out
  }

  /// Plane-strain restriction to the leading `dim` axes.
  pub fn restrict(&self, dim: usize) -> Self {
    let strain = sym_pairs(dim).iter().map(|&(i, j)| self.d_strain(i, j).restrict(dim)).collect();
    Self { dim, strain, pressure: [self.pressure[0].restrict(dim), self.pressure[1].restrict(dim)] }
  }
}

/// Evaluates the shape derivatives at the strain and pressure modes.
pub fn build_mode_sensitivities(mesh: &CellMesh, mats: &Materials, corr: &CorrectorSet) -> Result<CoefficientSensitivities, CellError> {
  let dim = mesh.dim();
  let mut strain = Vec::new();
  for (i, j) in sym_pairs(dim) {
    strain.push(shape_derivative(mesh, mats, corr, &strain_mode(mesh, corr, i, j)?));
  }
  let pf = shape_derivative(mesh, mats, corr, &pressure_mode(mesh, corr, Pore::Channel)?);
  let pc = shape_derivative(mesh, mats, corr, &pressure_mode(mesh, corr, Pore::Inclusion)?);
  Ok(CoefficientSensitivities { dim, strain, pressure: [pf, pc] })
}

/// `H̃(e, p) = H⁰ + ∂_e H ∘ e + Σ_P ∂_{p_P} H p_P`.
pub fn secant_coefficients(h0: &HomogenizedCoefficients, sens: &CoefficientSensitivities, e: &Mat, p: [f64; 2]) -> HomogenizedCoefficients {
  let d = sens.directional(e, p);
  let mut out = h0.clone();
  out.a = out.a.axpy(1.0, &d.a);
  for q in 0..2 {
    out.b[q] = out.b[q].add(&d.b[q]);
    out.phi[q] += d.phi[q];
    for r in 0..2 {
      out.m[q][r] += d.m[q][r];
    }
  }
  out.k = out.k.add(&d.k);
  out
}

/// Tangent coefficients of the linearized deformation-dependent model.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentSet {
  /// `C̄_ijkl` multiplying `e_kl(δu)` in the stress.
  pub c: Tensor4,
  /// `B̄^Q` multiplying `δp_Q` in the stress.
  pub b: [Mat; 2],
  /// `D̄_P` multiplying `e(δu)` in the storage of pore `P`.
  pub d: [Mat; 2],
  /// `M̄^{PQ}`.
  pub m: [[f64; 2]; 2],
  pub k: Mat,
  /// `Ḡ[r]_kl`: flux component `r` per unit `e_kl(δu)`.
  pub g: [Mat; 3],
  /// `Q̄_Q[r]`: flux component `r` per unit `δp_Q`.
  pub q: [[f64; 3]; 2],
}

/// Macroscopic state at a point: strain and the two pressures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointState {
  pub strain: Mat,
  pub p: [f64; 2],
}

/// Tangent coefficients at state `cur` with previous state `prev` and
/// Darcy drive `∇p_f − f`.
pub fn tangent_coefficients(
  h0: &HomogenizedCoefficients,
  sens: &CoefficientSensitivities,
  cur: &PointState,
  prev: &PointState,
  drive: [f64; 3],
) -> TangentSet {
  let dim = h0.dim;
  let hs = secant_coefficients(h0, sens, &cur.strain, cur.p);
  let de = cur.strain.sub(&prev.strain);
  let dp = [cur.p[0] - prev.p[0], cur.p[1] - prev.p[1]];
  let kvec = |k: &Mat| -> [f64; 3] {
    let mut r = [0.0; 3];
    for i in 0..dim {
      for j in 0..dim {
        r[i] += k.m[i][j] * drive[j];
      }
    }
    r
  };

  let mut c = hs.a;
  let mut d = hs.b;
  let mut g = [Mat::zeros(dim); 3];
  for k in 0..dim {
    for l in 0..dim {
      let s = sens.d_strain(k, l);
      let extra = s.a.ddot(&cur.strain).axpy(-cur.p[0], &s.b[0]).axpy(-cur.p[1], &s.b[1]);
      for i in 0..dim {
        for j in 0..dim {
          c.t[i][j][k][l] += extra.m[i][j];
        }
      }
      for p in 0..2 {
        d[p].m[k][l] += s.b[p].ddot(&de) + s.m[p][0] * dp[0] + s.m[p][1] * dp[1];
      }
      let f = kvec(&s.k);
      for r in 0..dim {
        g[r].m[k][l] = f[r];
      }
    }
  }
  let mut b = hs.b;
  let mut m = hs.m;
  let mut qv = [[0.0; 3]; 2];
  for qq in 0..2 {
    let s = &sens.pressure[qq];
    b[qq] = b[qq].axpy(cur.p[0], &s.b[0]).axpy(cur.p[1], &s.b[1]).sub(&s.a.ddot(&cur.strain));
    for p in 0..2 {
      m[p][qq] += s.m[p][0] * dp[0] + s.m[p][1] * dp[1] + s.b[p].ddot(&de);
    }
    qv[qq] = kvec(&s.k);
  }
  TangentSet { c, b, d, m, k: hs.k, g, q: qv }
}

/// Point response of the deformation-dependent model: stress, pore storage
/// increments and Darcy flux, all with the secant coefficients at `cur`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointResponse {
  pub stress: Mat,
  pub storage: [f64; 2],
  pub flux: [f64; 3],
}

pub fn point_response(h0: &HomogenizedCoefficients, sens: &CoefficientSensitivities, cur: &PointState, prev: &PointState, drive: [f64; 3]) -> PointResponse {
  let dim = h0.dim;
  let hs = secant_coefficients(h0, sens, &cur.strain, cur.p);
  let de = cur.strain.sub(&prev.strain);
  let stress = hs.a.ddot(&cur.strain).axpy(-cur.p[0], &hs.b[0]).axpy(-cur.p[1], &hs.b[1]);
  let mut storage = [0.0; 2];
  for p in 0..2 {
    storage[p] = hs.b[p].ddot(&de) + hs.m[p][0] * (cur.p[0] - prev.p[0]) + hs.m[p][1] * (cur.p[1] - prev.p[1]);
  }
  let mut flux = [0.0; 3];
  for i in 0..dim {
    for j in 0..dim {
      flux[i] += hs.k.m[i][j] * drive[j];
    }
  }
  PointResponse { stress, storage, flux }
}
