//! Characteristic problems of the reference cell: strain and pressure
//! correctors in the solid, flow correctors in the channel.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::fem::assemble::{
  assemble_divergence, assemble_elasticity, assemble_pressure_jump, assemble_stokes_viscosity, assemble_vector, QuadSet,
};
use crate::fem::{DofMap, DofMapSpec, FemError, LuFactor, Permeability, Slot, SolveError, SparseMatrix};
use crate::materials::Materials;
use crate::mesh::{CellMesh, Grid, Subdomain};
use crate::tensor::{Mat, Tensor4};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CellError {
  #[error(transparent)]
  Fem(#[from] FemError),
  #[error("solver failure: {0}")]
  Solver(#[from] SolveError),
  #[error("channel flow problem is singular beyond the pressure constants")]
  DisconnectedChannel,
  #[error("cell has no solid phase")]
  NoSolid,
}

/// Fluid pores with their own pressure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Pore {
  Channel = 0,
  Inclusion = 1,
}

impl Pore {
  pub const ALL: [Pore; 2] = [Pore::Channel, Pore::Inclusion];

  pub fn contains(self, tag: Subdomain) -> bool {
    match self {
      Pore::Channel => tag.is_channel(),
      Pore::Inclusion => tag == Subdomain::FluidInclusion,
    }
  }
}

/// Index pairs `(i, j)`, `i ≤ j`, in Voigt order.
pub fn sym_pairs(dim: usize) -> Vec<(usize, usize)> {
  if dim == 2 {
    vec![(0, 0), (1, 1), (0, 1)]
  } else {
    vec![(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)]
  }
}

/// Position of `(i, j)` in [`sym_pairs`].
pub fn pair_index(dim: usize, i: usize, j: usize) -> usize {
  let (i, j) = if i <= j { (i, j) } else { (j, i) };
  sym_pairs(dim).iter().position(|&p| p == (i, j)).unwrap()
}

pub fn elements_where(mesh: &CellMesh, pred: impl Fn(Subdomain) -> bool) -> Vec<usize> {
  (0..mesh.tags.len()).filter(|&e| pred(mesh.tags[e])).collect()
}

/// Periodic `Q1` displacement map on the solid.
pub fn displacement_map(mesh: &CellMesh) -> DofMap {
  let elems = elements_where(mesh, |t| t.is_solid());
  DofMap::new(
    &mesh.grid,
    &DofMapSpec { order: 1, ncomp: mesh.dim(), elements: &elems, periodic: mesh.periodic_axes(), split: None, fixed: None },
  )
}

/// Local values of a field on element `e`, taking zero at nodes the map does
/// not carry. On elements outside the map this is the zero extension.
pub fn gather_extended(grid: &Grid, map: &DofMap, e: usize, x: &[f64]) -> Vec<f64> {
  if map.is_active(e) {
    return map.gather(e, x);
  }
  let mut out = Vec::with_capacity(map.n_local() * map.ncomp);
  for node in grid.element_nodes(e, map.order) {
    match map.node_slots(grid, node, 0) {
      Some(s) => out.extend(s.iter().map(|&sl| map.value(sl, x))),
      None => out.extend(core::iter::repeat(0.0).take(map.ncomp)),
    }
  }
  out
}

/// Slots of element `e` including nodes shared with the map from outside it.
pub fn extended_slots(grid: &Grid, map: &DofMap, e: usize) -> Vec<Option<Slot>> {
  if let Some(s) = map.element_slots(e) {
    return s.iter().map(|&x| Some(x)).collect();
  }
  let mut out = Vec::new();
  for node in grid.element_nodes(e, map.order) {
    match map.node_slots(grid, node, 0) {
      Some(s) => out.extend(s.iter().map(|&x| Some(x))),
      None => out.extend(core::iter::repeat(None).take(map.ncomp)),
    }
  }
  out
}

/// Gradient `G_ij = ∂_j u_i` at every point of `geom` from node-major local values.
pub fn local_gradients(dim: usize, geom: &crate::fem::element::ElementGeometry, tab: &crate::fem::element::Tabulation, local: &[f64]) -> Vec<Mat> {
  (0..geom.jxw.len())
    .map(|q| {
      let mut g = Mat::zeros(dim);
      for a in 0..tab.n_basis {
        let d = geom.phys_grad(q, tab.grad(q, a));
        for i in 0..dim {
          let v = local[a * dim + i];
          if v != 0.0 {
            for j in 0..dim {
              g.m[i][j] += v * d[j];
            }
          }
        }
      }
      g
    })
    .collect()
}

/// Lumped weights `∫ N_a / |Y|` of every free unknown.
pub fn lumped_weights(grid: &Grid, map: &DofMap, volume: f64) -> Vec<f64> {
  let quad = QuadSet::new(grid.dim, map.order + 1);
  let nc = map.ncomp;
  assemble_vector(map, &map.elements, |e, out| {
    let geom = quad.geometry(grid, e);
    let tab = quad.tab(map.order);
    for q in 0..quad.rule.len() {
      for a in 0..tab.n_basis {
        let v = tab.val(q, a) * geom.jxw[q] / volume;
        for c in 0..nc {
          out[a * nc + c] += v;
        }
      }
    }
  })
}

/// Factorized periodic elasticity operator of the solid.
pub struct ElasticCell {
  pub map: DofMap,
  pub matrix: SparseMatrix,
  pub lu: LuFactor,
  pub nullspace: Vec<Vec<f64>>,
  pub volume: f64,
  weights: Vec<f64>,
}

impl ElasticCell {
  pub fn new(mesh: &CellMesh, mats: &Materials) -> Result<Self, CellError> {
    let map = displacement_map(mesh);
    if map.n_free == 0 {
      return Err(CellError::NoSolid);
    }
    let volume = mesh.volume();
    let dim = mesh.dim();
    let matrix = assemble_elasticity(&mesh.grid, &map, |e| mats.solid_tensor(dim, mesh.tags[e]), volume)?;
    let mut nullspace = Vec::new();
    for c in 0..dim {
      nullspace.extend(map.component_indicators(c));
    }
    let lu = LuFactor::new(&matrix, &nullspace)?;
    let weights = lumped_weights(&mesh.grid, &map, volume);
    Ok(Self { map, matrix, lu, nullspace, volume, weights })
  }

  /// Solution with zero mean over the solid.
  pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, CellError> {
    self.solve_with_scale(rhs, 0.0)
  }

  /// Solution for a load whose entries may cancel down to roundoff.
  pub fn solve_with_scale(&self, rhs: &[f64], scale: f64) -> Result<Vec<f64>, CellError> {
    let mut x = self.lu.solve_with_scale(rhs, scale)?;
    self.zero_mean(&mut x);
    Ok(x)
  }

  pub fn zero_mean(&self, x: &mut [f64]) {
    let dim = self.map.ncomp;
    for c in 0..dim {
      let mask = self.map.component_mask(c);
      let (mut s, mut w) = (0.0, 0.0);
      for i in 0..x.len() {
        if mask[i] != 0.0 {
          s += self.weights[i] * x[i];
          w += self.weights[i];
        }
      }
      if w > 0.0 {
        let m = s / w;
        for i in 0..x.len() {
          if mask[i] != 0.0 {
            x[i] -= m;
          }
        }
      }
    }
  }
}

/// `−⨍ e(v) : A E` for a constant strain `E`.
pub fn strain_load(mesh: &CellMesh, mats: &Materials, map: &DofMap, strain: &Mat, volume: f64) -> Vec<f64> {
  strain_load_parts(mesh, mats, map, strain, volume, false)
}

/// Euclidean norm of the strain load before cancellation between elements.
pub fn strain_load_scale(mesh: &CellMesh, mats: &Materials, map: &DofMap, strain: &Mat, volume: f64) -> f64 {
  libm::sqrt(strain_load_parts(mesh, mats, map, strain, volume, true).iter().map(|v| v * v).sum())
}

fn strain_load_parts(mesh: &CellMesh, mats: &Materials, map: &DofMap, strain: &Mat, volume: f64, gross: bool) -> Vec<f64> {
  let dim = mesh.dim();
  let quad = QuadSet::new(dim, 2);
  assemble_vector(map, &map.elements, |e, out| {
    let sigma = mats.solid_tensor(dim, mesh.tags[e]).ddot(strain);
    let geom = quad.geometry(&mesh.grid, e);
    for q in 0..quad.rule.len() {
      for a in 0..quad.q1.n_basis {
        let g = geom.phys_grad(q, quad.q1.grad(q, a));
        for i in 0..dim {
          let mut s = 0.0;
          for j in 0..dim {
            s += sigma.m[i][j] * g[j];
          }
          let v = geom.jxw[q] * s / volume;
          out[a * dim + i] -= if gross { -v.abs() } else { v };
        }
      }
    }
  })
}

/// `−⨍_{Y_P} ∇·ṽ` with `ṽ` the zero extension of `v` into the pore.
pub fn pore_load(mesh: &CellMesh, map: &DofMap, pore: Pore, volume: f64) -> Vec<f64> {
  let dim = mesh.dim();
  let quad = QuadSet::new(dim, 2);
  let mut out = vec![0.0; map.n_free];
  for e in elements_where(mesh, |t| pore.contains(t)) {
    let slots = extended_slots(&mesh.grid, map, e);
    let geom = quad.geometry(&mesh.grid, e);
    for q in 0..quad.rule.len() {
      for a in 0..quad.q1.n_basis {
        let g = geom.phys_grad(q, quad.q1.grad(q, a));
        for i in 0..dim {
          if let Some(Slot::Free(r)) = slots[a * dim + i] {
            out[r] -= geom.jxw[q] * g[i] / volume;
          }
        }
      }
    }
  }
  out
}

/// Channel flow correctors and the operators they solve.
#[derive(Clone, Debug)]
pub struct StokesCorrectors {
  pub w_map: DofMap,
  pub p_map: DofMap,
  /// `ψ^k` on `w_map`.
  pub psi: Vec<Vec<f64>>,
  /// `π^k` on `p_map`.
  pub pi: Vec<Vec<f64>>,
  pub kappa: Permeability,
  pub mu_bar: f64,
  pub viscosity: SparseMatrix,
  pub jump: Option<SparseMatrix>,
  /// `⨍ v_k` as vectors on `w_map`.
  pub loads: Vec<Vec<f64>>,
}

/// Whether the membranes carry a jump term, a hard wall, or nothing.
fn membrane_mode(mesh: &CellMesh, kappa: Permeability) -> (bool, bool) {
  let has = !mesh.membranes.is_empty();
  match kappa {
    Permeability::Infinite => (false, false),
    Permeability::Finite(k) if k == 0.0 => (has, false),
    Permeability::Finite(_) => (has, has),
  }
}

pub fn velocity_map(mesh: &CellMesh, kappa: Permeability) -> DofMap {
  let grid = &mesh.grid;
  let periodic = mesh.periodic_axes();
  let mut wall = BTreeSet::new();
  for e in elements_where(mesh, |t| !t.is_channel()) {
    for n in grid.element_nodes(e, 2) {
      wall.insert(crate::fem::dofmap::canonical(grid, 2, n, &periodic));
    }
  }
  let blocked = matches!(kappa, Permeability::Finite(k) if k == 0.0);
  let fixed = |canon: usize, _key: usize, comp: usize| -> Option<f64> {
    if wall.contains(&canon) {
      return Some(0.0);
    }
    if blocked {
      let c = grid.lattice_coords(2, canon);
      if mesh.membranes.iter().any(|m| m.axis == comp && c[m.axis] == 2 * m.plane) {
        return Some(0.0);
      }
    }
    None
  };
  let elems = elements_where(mesh, |t| t.is_channel());
  DofMap::new(grid, &DofMapSpec { order: 2, ncomp: mesh.dim(), elements: &elems, periodic, split: None, fixed: Some(&fixed) })
}

pub fn pressure_map(mesh: &CellMesh, kappa: Permeability) -> DofMap {
  let grid = &mesh.grid;
  let elems = elements_where(mesh, |t| t.is_channel());
  let (split_on, _) = membrane_mode(mesh, kappa);
  let split = |e: usize, canon: usize| -> usize {
    let c = grid.lattice_coords(1, canon);
    if mesh.membranes.iter().any(|m| c[m.axis] == m.plane) {
      match mesh.tags[e] {
        Subdomain::FluidChannel(k) => k,
        _ => 0,
      }
    } else {
      0
    }
  };
  let spec = DofMapSpec {
    order: 1,
    ncomp: 1,
    elements: &elems,
    periodic: mesh.periodic_axes(),
    split: if split_on { Some(&split) } else { None },
    fixed: None,
  };
  DofMap::new(grid, &spec)
}

/// Axes along which the channel network wraps around the periodic cell;
/// with `blocked`, faces on membrane planes do not connect.
pub fn channel_percolation(mesh: &CellMesh, blocked: bool) -> [bool; 3] {
  let grid = &mesh.grid;
  let dim = grid.dim;
  let n = grid.n;
  let ne = grid.n_elements();
  let cut = |axis: usize, plane: usize| blocked && mesh.membranes.iter().any(|m| m.axis == axis && m.plane % n[axis] == plane % n[axis]);
  let mut wraps: Vec<Option<[i64; 3]>> = vec![None; ne];
  let mut out = [false; 3];
  for start in (0..ne).filter(|&e| mesh.tags[e].is_channel()) {
    if wraps[start].is_some() {
      continue;
    }
    wraps[start] = Some([0; 3]);
    let mut stack = vec![start];
    while let Some(e) = stack.pop() {
      let c = grid.element_coords(e);
      let w = wraps[e].unwrap();
      for a in 0..dim {
        for up in [false, true] {
          let plane = if up { c[a] + 1 } else { c[a] };
          if cut(a, plane) {
            continue;
          }
          let mut d = c;
          let mut nw = w;
          if up {
            d[a] = (c[a] + 1) % n[a];
            if d[a] == 0 {
              nw[a] += 1;
            }
          } else {
            d[a] = (c[a] + n[a] - 1) % n[a];
            if c[a] == 0 {
              nw[a] -= 1;
            }
          }
          let f = grid.element_index(d);
          if !mesh.tags[f].is_channel() {
            continue;
          }
          match wraps[f] {
            None => {
              wraps[f] = Some(nw);
              stack.push(f);
            }
            Some(old) => {
              for k in 0..dim {
                out[k] |= old[k] != nw[k];
              }
            }
          }
        }
      }
    }
  }
  out
}

/// Solves the flow correctors `(ψ^k, π^k)` for all directions `k`.
pub fn solve_stokes_correctors(mesh: &CellMesh, mu_bar: f64, kappa: Permeability) -> Result<StokesCorrectors, CellError> {
  let grid = &mesh.grid;
  let dim = mesh.dim();
  let volume = mesh.volume();
  let w_map = velocity_map(mesh, kappa);
  let p_map = pressure_map(mesh, kappa);
  if w_map.n_free == 0 {
    let empty = SparseMatrix::zeros(0, 0);
    return Ok(StokesCorrectors {
      w_map,
      p_map,
      psi: vec![Vec::new(); dim],
      pi: vec![vec![0.0; 0]; dim],
      kappa,
      mu_bar,
      viscosity: empty,
      jump: None,
      loads: vec![Vec::new(); dim],
    });
  }
  let (_, jump_on) = membrane_mode(mesh, kappa);
  let visc = Tensor4::viscous(dim, mu_bar);
  let a = assemble_stokes_viscosity(grid, &w_map, &visc, &mesh.facets.membrane, kappa, volume)?;
  let g = assemble_divergence(grid, &p_map, &w_map, volume);
  let jump = match kappa {
    Permeability::Finite(k) if jump_on => Some(assemble_pressure_jump(grid, &p_map, &mesh.facets.membrane, k, volume)?),
    _ => None,
  };
  let (nw, np) = (w_map.n_free, p_map.n_free);
  let gt = g.transpose();
  let mut blocks = vec![(0, 0, 1.0, &a), (0, 1, 1.0, &gt), (1, 0, 1.0, &g)];
  if let Some(j) = &jump {
    blocks.push((1, 1, -1.0, j));
  }
  let system = SparseMatrix::from_blocks(&[nw, np], &[nw, np], &blocks);

  let components = p_map.component_indicators(0);
  let pad = |v: &[f64]| -> Vec<f64> {
    let mut out = vec![0.0; nw + np];
    out[nw..].copy_from_slice(v);
    out
  };
  let nullspace: Vec<Vec<f64>> = if jump.is_some() {
    let mut all = vec![0.0; np];
    for c in &components {
      for (a, b) in all.iter_mut().zip(c) {
        *a += b;
      }
    }
    vec![pad(&all)]
  } else {
    components.iter().map(|c| pad(c)).collect()
  };
  let lu = LuFactor::new(&system, &nullspace).map_err(|e| match e {
    SolveError::SingularMatrix { .. } => CellError::DisconnectedChannel,
    other => CellError::Solver(other),
  })?;

  let quad = QuadSet::new(dim, 3);
  let loads: Vec<Vec<f64>> = (0..dim)
    .map(|k| {
      assemble_vector(&w_map, &w_map.elements, |e, out| {
        let geom = quad.geometry(grid, e);
        for q in 0..quad.rule.len() {
          for b in 0..quad.q2.n_basis {
            out[b * dim + k] += quad.q2.val(q, b) * geom.jxw[q] / volume;
          }
        }
      })
    })
    .collect();

  let pw = lumped_weights(grid, &p_map, volume);
  let groups: Vec<Vec<f64>> = if jump.is_some() { vec![vec![1.0; np]] } else { components };
  let mut psi = Vec::with_capacity(dim);
  let mut pi = Vec::with_capacity(dim);
  for load in &loads {
    let mut rhs = load.clone();
    rhs.resize(nw + np, 0.0);
    let x = lu.solve(&rhs)?;
    let mut p = x[nw..].to_vec();
    for ind in &groups {
      let (mut s, mut w) = (0.0, 0.0);
      for i in 0..np {
        s += ind[i] * pw[i] * p[i];
        w += ind[i] * pw[i];
      }
      if w > 0.0 {
        for i in 0..np {
          p[i] -= ind[i] * s / w;
        }
      }
    }
    psi.push(x[..nw].to_vec());
    pi.push(p);
  }
  // Closed membranes that cut every periodic path leave no flow along that axis.
  if matches!(kappa, Permeability::Finite(k) if k == 0.0) && !mesh.membranes.is_empty() {
    let open = channel_percolation(mesh, true);
    for (k, v) in psi.iter_mut().enumerate() {
      if !open[k] {
        v.iter_mut().for_each(|x| *x = 0.0);
      }
    }
  }
  Ok(StokesCorrectors { w_map, p_map, psi, pi, kappa, mu_bar, viscosity: a, jump, loads })
}

/// All characteristic responses of a cell.
pub struct CorrectorSet {
  pub dim: usize,
  pub volume: f64,
  pub u_map: DofMap,
  pub elasticity: SparseMatrix,
  /// `ω^{ij}` in [`sym_pairs`] order.
  pub strain: Vec<Vec<f64>>,
  /// `ω^f`, `ω^c`.
  pub pressure: [Vec<f64>; 2],
  pub stokes: StokesCorrectors,
}

impl CorrectorSet {
  pub fn omega(&self, i: usize, j: usize) -> &[f64] {
    &self.strain[pair_index(self.dim, i, j)]
  }
}

/// Strain correctors `ω^{ij}` solving `a(ω^{ij} + Π^{ij}, v) = 0`.
pub fn solve_strain_correctors(mesh: &CellMesh, mats: &Materials, cell: &ElasticCell) -> Result<Vec<Vec<f64>>, CellError> {
  let dim = mesh.dim();
  sym_pairs(dim)
    .into_iter()
    .map(|(i, j)| {
      let e = Mat::sym_unit(dim, i, j);
      let scale = strain_load_scale(mesh, mats, &cell.map, &e, cell.volume);
      cell.solve_with_scale(&strain_load(mesh, mats, &cell.map, &e, cell.volume), scale)
    })
    .collect()
}

/// Pressure correctors `ω^P` solving `a(ω^P, v) = −⨍_{Y_P} ∇·ṽ`.
pub fn solve_pressure_correctors(mesh: &CellMesh, cell: &ElasticCell) -> Result<[Vec<f64>; 2], CellError> {
  let f = cell.solve(&pore_load(mesh, &cell.map, Pore::Channel, cell.volume))?;
  let c = cell.solve(&pore_load(mesh, &cell.map, Pore::Inclusion, cell.volume))?;
  Ok([f, c])
}

pub fn solve_correctors(mesh: &CellMesh, mats: &Materials) -> Result<CorrectorSet, CellError> {
  let cell = ElasticCell::new(mesh, mats)?;
  let strain = solve_strain_correctors(mesh, mats, &cell)?;
  let pressure = solve_pressure_correctors(mesh, &cell)?;
  let stokes = solve_stokes_correctors(mesh, mats.mu_bar(), mats.membrane)?;
  Ok(CorrectorSet { dim: mesh.dim(), volume: cell.volume, u_map: cell.map, elasticity: cell.matrix, strain, pressure, stokes })
}
