//! Structured voxel meshes for the periodic cell and the macroscopic sample.
//!
//! Both meshes are tensor-product grids of quadrilaterals (2D) or hexahedra
//! (3D). Vertex coordinates are stored explicitly so that a mesh can be moved
//! node by node without changing its topology.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fem::element::{ElementGeometry, QuadratureRule, Tabulation};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MeshError {
  #[error("geometry infeasible: {0}")]
  GeometryInfeasible(String),
  #[error("resolution too coarse: {0}")]
  ResolutionTooCoarse(String),
}

/// Tensor-product grid with explicit vertex coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Grid {
  pub dim: usize,
  /// Elements per axis; unused axes hold 1.
  pub n: [usize; 3],
  pub vertices: Vec<[f64; 3]>,
}

impl Grid {
  /// Grid through the given per-axis vertex coordinates.
  pub fn tensor(dim: usize, coords: &[Vec<f64>]) -> Self {
    let mut n = [1usize; 3];
    for a in 0..dim {
      n[a] = coords[a].len() - 1;
    }
    let nv = |a: usize| if a < dim { n[a] + 1 } else { 1 };
    let mut vertices = Vec::with_capacity(nv(0) * nv(1) * nv(2));
    for k in 0..nv(2) {
      for j in 0..nv(1) {
        for i in 0..nv(0) {
          let mut x = [0.0; 3];
          x[0] = coords[0][i];
          x[1] = coords[1][j];
          if dim == 3 {
            x[2] = coords[2][k];
          }
          vertices.push(x);
        }
      }
    }
    Self { dim, n, vertices }
  }

  pub fn uniform(dim: usize, res: usize) -> Self {
    let c: Vec<f64> = (0..=res).map(|i| i as f64 / res as f64).collect();
    Self::tensor(dim, &vec![c; dim])
  }

  /// Lattice points per axis for order `p`.
  pub fn lattice_size(&self, p: usize) -> [usize; 3] {
    let mut s = [1usize; 3];
    for a in 0..self.dim {
      s[a] = p * self.n[a] + 1;
    }
    s
  }

  pub fn n_elements(&self) -> usize {
    self.n[0] * self.n[1] * if self.dim == 3 { self.n[2] } else { 1 }
  }

  pub fn n_lattice(&self, p: usize) -> usize {
    let s = self.lattice_size(p);
    s[0] * s[1] * s[2]
  }

  #[inline]
  pub fn element_coords(&self, e: usize) -> [usize; 3] {
    [e % self.n[0], (e / self.n[0]) % self.n[1], e / (self.n[0] * self.n[1])]
  }

  #[inline]
  pub fn element_index(&self, c: [usize; 3]) -> usize {
    c[0] + self.n[0] * (c[1] + self.n[1] * c[2])
  }

  #[inline]
  pub fn lattice_index(&self, p: usize, c: [usize; 3]) -> usize {
    let s = self.lattice_size(p);
    c[0] + s[0] * (c[1] + s[1] * c[2])
  }

  #[inline]
  pub fn lattice_coords(&self, p: usize, idx: usize) -> [usize; 3] {
    let s = self.lattice_size(p);
    [idx % s[0], (idx / s[0]) % s[1], idx / (s[0] * s[1])]
  }

  /// Lattice nodes of element `e` for order `p`, in local order.
  pub fn element_nodes(&self, e: usize, p: usize) -> Vec<usize> {
    let c = self.element_coords(e);
    let pz = if self.dim == 3 { p + 1 } else { 1 };
    let mut out = Vec::with_capacity((p + 1) * (p + 1) * pz);
    for k in 0..pz {
      for j in 0..=p {
        for i in 0..=p {
          out.push(self.lattice_index(p, [p * c[0] + i, p * c[1] + j, p * c[2] + k]));
        }
      }
    }
    out
  }

  pub fn element_vertex_coords(&self, e: usize) -> Vec<[f64; 3]> {
    self.element_nodes(e, 1).iter().map(|&v| self.vertices[v]).collect()
  }

  /// Physical position of lattice node `idx` of order `p` through the element map.
  pub fn lattice_position(&self, p: usize, idx: usize) -> [f64; 3] {
    let c = self.lattice_coords(p, idx);
    let mut ec = [0usize; 3];
    let mut xi = [0.0; 3];
    for a in 0..self.dim {
      let e = (c[a] / p).min(self.n[a] - 1);
      ec[a] = e;
      xi[a] = 2.0 * (c[a] - p * e) as f64 / p as f64 - 1.0;
    }
    self.map_point(self.element_index(ec), &xi)
  }

  /// Image of reference point `xi` under the map of element `e`.
  pub fn map_point(&self, e: usize, xi: &[f64; 3]) -> [f64; 3] {
    let verts = self.element_vertex_coords(e);
    let nb = verts.len();
    let mut vals = vec![0.0; nb];
    let mut grads = vec![[0.0; 3]; nb];
    crate::fem::element::eval_basis(self.dim, 1, xi, &mut vals, &mut grads);
    let mut x = [0.0; 3];
    for (a, v) in verts.iter().enumerate() {
      for i in 0..3 {
        x[i] += vals[a] * v[i];
      }
    }
    x
  }

  /// Neighbour across face `(axis, side)`, wrapping when `periodic[axis]`.
  pub fn neighbor(&self, e: usize, axis: usize, side: usize, periodic: &[bool; 3]) -> Option<usize> {
    let mut c = self.element_coords(e);
    if side == 1 {
      if c[axis] + 1 < self.n[axis] {
        c[axis] += 1;
      } else if periodic[axis] {
        c[axis] = 0;
      } else {
        return None;
      }
    } else if c[axis] > 0 {
      c[axis] -= 1;
    } else if periodic[axis] {
      c[axis] = self.n[axis] - 1;
    } else {
      return None;
    }
    Some(self.element_index(c))
  }

  /// Lattice nodes of order `p` on face `(axis, side)` of element `e`.
  pub fn face_nodes(&self, e: usize, p: usize, axis: usize, side: usize) -> Vec<usize> {
    let nodes = self.element_nodes(e, p);
    (0..nodes.len())
      .filter(|&a| crate::fem::element::local_index(self.dim, p, a)[axis] == side * p)
      .map(|a| nodes[a])
      .collect()
  }

  pub fn element_volume(&self, e: usize) -> f64 {
    let rule = QuadratureRule::gauss(self.dim, 2);
    let geo = Tabulation::new(self.dim, 1, &rule);
    ElementGeometry::new(self.dim, &self.element_vertex_coords(e), &rule, &geo).volume()
  }

  pub fn element_center(&self, e: usize) -> [f64; 3] {
    self.map_point(e, &[0.0; 3])
  }

  /// Element containing `x` and the reference coordinates of `x` in it,
  /// assuming an axis-aligned undeformed grid.
  pub fn locate(&self, x: &[f64; 3]) -> Option<(usize, [f64; 3])> {
    let mut c = [0usize; 3];
    let mut xi = [0.0; 3];
    for a in 0..self.dim {
      let stride = self.lattice_index(1, unit_shift(a));
      let coord = |i: usize| self.vertices[i * stride][a];
      let n = self.n[a];
      if x[a] < coord(0) - 1e-12 || x[a] > coord(n) + 1e-12 {
        return None;
      }
      let mut lo = 0;
      while lo + 1 < n && coord(lo + 1) <= x[a] {
        lo += 1;
      }
      c[a] = lo;
      let (x0, x1) = (coord(lo), coord(lo + 1));
      xi[a] = (2.0 * (x[a] - x0) / (x1 - x0) - 1.0).clamp(-1.0, 1.0);
    }
    Some((self.element_index(c), xi))
  }
}

fn unit_shift(a: usize) -> [usize; 3] {
  let mut c = [0; 3];
  c[a] = 1;
  c
}

/// Subdomain of a cell element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subdomain {
  SolidSoft,
  SolidStiff,
  /// Channel element in compartment `k`.
  FluidChannel(usize),
  FluidInclusion,
}

impl Subdomain {
  pub fn is_solid(self) -> bool {
    matches!(self, Subdomain::SolidSoft | Subdomain::SolidStiff)
  }

  pub fn is_channel(self) -> bool {
    matches!(self, Subdomain::FluidChannel(_))
  }
}

/// Element face: `axis`, `side` (0 = minus, 1 = plus) of element `elem`.
/// The reference normal points out of `elem`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Facet {
  pub elem: usize,
  pub axis: usize,
  pub side: usize,
}

/// Axis-normal membrane plane inside the channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Membrane {
  pub axis: usize,
  /// Vertex plane index along `axis`.
  pub plane: usize,
  pub position: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellGeometrySpec {
  pub dim: usize,
  pub resolution: usize,
  /// Radius of the channel cross-section; the half-width of the strip in 2D.
  pub channel_radius: f64,
  /// Zero for a cell without inclusion.
  pub inclusion_radius: f64,
  pub stiff_shell_thickness: f64,
  pub n_compartments: usize,
  pub membrane_positions: Vec<f64>,
  /// Axes along which channels run; channels sit on the cell edges.
  pub channel_axes: Vec<usize>,
}

impl CellGeometrySpec {
  /// Channel along `y_1`, round inclusion at the cell centre, no membranes.
  pub fn paper_like(dim: usize, resolution: usize) -> Self {
    Self {
      dim,
      resolution,
      channel_radius: 0.125,
      inclusion_radius: 0.22,
      stiff_shell_thickness: 0.0625,
      n_compartments: 1,
      membrane_positions: Vec::new(),
      channel_axes: vec![0],
    }
  }
}

/// Facet sets of the cell.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FacetSets {
  /// Solid–channel wall, seen from the channel (normal into the solid).
  pub fluid_solid: Vec<Facet>,
  /// Inclusion surface, seen from the inclusion (normal into the solid).
  pub inclusion: Vec<Facet>,
  /// Membrane facets, seen from compartment `k` (normal towards `k + 1`).
  pub membrane: Vec<Facet>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellMesh {
  pub spec: CellGeometrySpec,
  pub grid: Grid,
  pub tags: Vec<Subdomain>,
  pub membranes: Vec<Membrane>,
  pub facets: FacetSets,
  /// `(minus-face vertex, plus-face vertex, axis)`.
  pub periodic_pairs: Vec<(usize, usize, usize)>,
}

fn periodic_distance(t: f64) -> f64 {
  let t = t - libm::floor(t);
  t.min(1.0 - t)
}

pub fn build_cell_mesh(spec: &CellGeometrySpec) -> Result<CellMesh, MeshError> {
  let dim = spec.dim;
  if dim != 2 && dim != 3 {
    return Err(MeshError::GeometryInfeasible(format!("dimension {dim}")));
  }
  let res = spec.resolution;
  if res < 4 {
    return Err(MeshError::ResolutionTooCoarse(format!("resolution {res} < 4")));
  }
  let h = 1.0 / res as f64;
  if spec.channel_axes.is_empty() || spec.channel_axes.len() > 2 || spec.channel_axes.iter().any(|&a| a >= dim) {
    return Err(MeshError::GeometryInfeasible("channel axes must be one or two cell axes".into()));
  }
  if spec.channel_radius < 0.0 || spec.channel_radius >= 0.5 {
    return Err(MeshError::GeometryInfeasible("channel radius outside [0, 1/2)".into()));
  }
  if spec.stiff_shell_thickness < 0.0 || spec.inclusion_radius < 0.0 {
    return Err(MeshError::GeometryInfeasible("negative size".into()));
  }
  let grid = Grid::uniform(dim, res);
  let centre = [0.5, 0.5, if dim == 3 { 0.5 } else { 0.0 }];
  let axis_distance = |x: &[f64; 3], a: usize| -> f64 {
    let mut s = 0.0;
    for b in 0..dim {
      if b != a {
        let d = periodic_distance(x[b]);
        s += d * d;
      }
    }
    libm::sqrt(s)
  };

  if spec.inclusion_radius > 0.0 {
    if spec.inclusion_radius >= 0.5 {
      return Err(MeshError::GeometryInfeasible("inclusion touches the cell boundary".into()));
    }
    let gap = spec.channel_radius + spec.stiff_shell_thickness;
    let nearest = spec.channel_axes.iter().map(|&a| axis_distance(&centre, a)).fold(f64::INFINITY, f64::min);
    if nearest - spec.inclusion_radius <= gap {
      return Err(MeshError::GeometryInfeasible("inclusion overlaps the channel or its shell".into()));
    }
  }

  let mut membranes = Vec::new();
  if !spec.membrane_positions.is_empty() {
    if spec.channel_axes.len() != 1 {
      return Err(MeshError::GeometryInfeasible("membranes need a single channel axis".into()));
    }
    let axis = spec.channel_axes[0];
    let mut planes: Vec<usize> = Vec::new();
    for &m in &spec.membrane_positions {
      let p = libm::round(m * res as f64);
      if (m * res as f64 - p).abs() > 1e-9 || p < 1.0 || p > (res - 1) as f64 {
        return Err(MeshError::GeometryInfeasible(format!("membrane at {m} is not an interior grid plane")));
      }
      planes.push(p as usize);
    }
    planes.sort_unstable();
    planes.dedup();
    if planes.len() != spec.membrane_positions.len() {
      return Err(MeshError::GeometryInfeasible("duplicate membrane planes".into()));
    }
    membranes = planes.iter().map(|&p| Membrane { axis, plane: p, position: p as f64 * h }).collect();
  }
  if spec.n_compartments != membranes.len() + 1 {
    return Err(MeshError::GeometryInfeasible(format!(
      "{} membranes define {} compartments, not {}",
      membranes.len(),
      membranes.len() + 1,
      spec.n_compartments
    )));
  }

  let ne = grid.n_elements();
  let mut tags = Vec::with_capacity(ne);
  for e in 0..ne {
    let c = grid.element_center(e);
    let d = spec.channel_axes.iter().map(|&a| axis_distance(&c, a)).fold(f64::INFINITY, f64::min);
    let tag = if d < spec.channel_radius {
      let ec = grid.element_coords(e);
      let k = membranes.iter().filter(|m| m.plane <= ec[m.axis]).count();
      Subdomain::FluidChannel(k)
    } else if d < spec.channel_radius + spec.stiff_shell_thickness {
      Subdomain::SolidStiff
    } else if spec.inclusion_radius > 0.0 && {
      let mut s = 0.0;
      for a in 0..dim {
        s += (c[a] - centre[a]) * (c[a] - centre[a]);
      }
      libm::sqrt(s) < spec.inclusion_radius
    } {
      Subdomain::FluidInclusion
    } else {
      Subdomain::SolidSoft
    };
    tags.push(tag);
  }
  if spec.channel_radius > 0.0 && !tags.iter().any(|t| t.is_channel()) {
    return Err(MeshError::ResolutionTooCoarse("channel not resolved by any element".into()));
  }
  for e in 0..ne {
    let c = grid.element_coords(e);
    if tags[e] == Subdomain::FluidInclusion && (0..dim).any(|a| c[a] == 0 || c[a] + 1 == res) {
      return Err(MeshError::GeometryInfeasible("inclusion touches the cell boundary".into()));
    }
  }
  if spec.inclusion_radius > 0.0 && !tags.contains(&Subdomain::FluidInclusion) {
    return Err(MeshError::ResolutionTooCoarse("inclusion not resolved by any element".into()));
  }
  if !tags.iter().any(|t| t.is_solid()) {
    return Err(MeshError::GeometryInfeasible("no solid left".into()));
  }

  let periodic = [true, true, dim == 3];
  let mut facets = FacetSets::default();
  for e in 0..ne {
    let c = grid.element_coords(e);
    for axis in 0..dim {
      let f = grid.neighbor(e, axis, 1, &periodic).unwrap();
      let (te, tf) = (tags[e], tags[f]);
      if te == tf {
        continue;
      }
      let mine = Facet { elem: e, axis, side: 1 };
      let theirs = Facet { elem: f, axis, side: 0 };
      match (te, tf) {
        (Subdomain::FluidChannel(_), s) | (s, Subdomain::FluidChannel(_)) if s.is_solid() => {
          facets.fluid_solid.push(if te.is_channel() { mine } else { theirs });
        }
        (Subdomain::FluidInclusion, s) | (s, Subdomain::FluidInclusion) if s.is_solid() => {
          facets.inclusion.push(if te == Subdomain::FluidInclusion { mine } else { theirs });
        }
        (Subdomain::FluidChannel(a), Subdomain::FluidChannel(b)) => {
          let plane = c[axis] + 1;
          if membranes.iter().any(|m| m.axis == axis && m.plane == plane) {
            if b == a + 1 {
              facets.membrane.push(mine);
            } else if a == b + 1 {
              facets.membrane.push(theirs);
            } else {
              return Err(MeshError::GeometryInfeasible("non-consecutive compartments across a membrane".into()));
            }
          }
        }
        (Subdomain::FluidChannel(_), Subdomain::FluidInclusion) | (Subdomain::FluidInclusion, Subdomain::FluidChannel(_)) => {
          return Err(MeshError::GeometryInfeasible("inclusion touches the channel".into()));
        }
        _ => {}
      }
    }
  }

  let mut periodic_pairs = Vec::new();
  let nv = grid.lattice_size(1);
  for axis in 0..dim {
    for idx in 0..grid.vertices.len() {
      let c = grid.lattice_coords(1, idx);
      if c[axis] == 0 {
        let mut o = c;
        o[axis] = nv[axis] - 1;
        periodic_pairs.push((idx, grid.lattice_index(1, o), axis));
      }
    }
  }

  Ok(CellMesh { spec: spec.clone(), grid, tags, membranes, facets, periodic_pairs })
}

impl CellMesh {
  pub fn dim(&self) -> usize {
    self.grid.dim
  }

  pub fn periodic_axes(&self) -> [bool; 3] {
    [true, true, self.grid.dim == 3]
  }

  pub fn measure_where(&self, pred: impl Fn(Subdomain) -> bool) -> f64 {
    (0..self.tags.len()).filter(|&e| pred(self.tags[e])).map(|e| self.grid.element_volume(e)).sum()
  }

  /// `|Y|`.
  pub fn volume(&self) -> f64 {
    self.measure_where(|_| true)
  }

  pub fn porosity_channel(&self) -> f64 {
    self.measure_where(|t| t.is_channel()) / self.volume()
  }

  pub fn porosity_inclusion(&self) -> f64 {
    self.measure_where(|t| t == Subdomain::FluidInclusion) / self.volume()
  }

  pub fn has_inclusion(&self) -> bool {
    self.tags.contains(&Subdomain::FluidInclusion)
  }

  /// Partner of vertex `v` across the periodic faces normal to `axis`.
  pub fn periodic_partner(&self, v: usize, axis: usize) -> Option<usize> {
    self
      .periodic_pairs
      .iter()
      .find_map(|&(a, b, ax)| if ax != axis { None } else if a == v { Some(b) } else if b == v { Some(a) } else { None })
  }

  /// Axes along which the solid phase connects to its own periodic image.
  pub fn solid_wraps(&self) -> [bool; 3] {
    let grid = &self.grid;
    let dim = grid.dim;
    let periodic = self.periodic_axes();
    let mut offset: Vec<Option<[i64; 3]>> = vec![None; self.tags.len()];
    let mut wraps = [false; 3];
    for start in 0..self.tags.len() {
      if !self.tags[start].is_solid() || offset[start].is_some() {
        continue;
      }
      offset[start] = Some([0; 3]);
      let mut stack = vec![start];
      while let Some(e) = stack.pop() {
        let oe = offset[e].unwrap();
        let c = grid.element_coords(e);
        for axis in 0..dim {
          for side in 0..2 {
            let Some(f) = grid.neighbor(e, axis, side, &periodic) else { continue };
            if !self.tags[f].is_solid() {
              continue;
            }
            let mut of = oe;
            if side == 1 && c[axis] + 1 == grid.n[axis] {
              of[axis] += 1;
            } else if side == 0 && c[axis] == 0 {
              of[axis] -= 1;
            }
            match offset[f] {
              None => {
                offset[f] = Some(of);
                stack.push(f);
              }
              Some(prev) => {
                for a in 0..dim {
                  if prev[a] != of[a] {
                    wraps[a] = true;
                  }
                }
              }
            }
          }
        }
      }
    }
    wraps
  }

  /// Copy of the mesh with every vertex moved by `tau * field[v]`.
  pub fn perturbed(&self, field: &[[f64; 3]], tau: f64) -> CellMesh {
    let mut out = self.clone();
    for (x, v) in out.grid.vertices.iter_mut().zip(field) {
      for i in 0..3 {
        x[i] += tau * v[i];
      }
    }
    out
  }
}

/// Region of a macroscopic element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
  Porous,
  Elastic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroGeometrySpec {
  pub dim: usize,
  /// Sample length `L` along `x_1`.
  pub length: f64,
  /// Total thickness `a`; the last axis is the thickness direction.
  pub thickness: f64,
  /// Height `h` of the porous layer.
  pub porous_height: f64,
  /// Elements across each layer.
  pub resolution: usize,
  /// Elements along `x_1`; derived from the aspect ratio when absent.
  pub elements_along: Option<usize>,
}

impl MacroGeometrySpec {
  /// Cantilever proportions `L = 0.1`, `a = 0.005`, `h = 5a/7`.
  pub fn cantilever(dim: usize, resolution: usize, elements_along: usize) -> Self {
    Self { dim, length: 0.1, thickness: 0.005, porous_height: 0.005 * 5.0 / 7.0, resolution, elements_along: Some(elements_along) }
  }
}

/// Facet on the macroscopic boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryFacet {
  pub facet: Facet,
  pub region: Region,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MacroMesh {
  pub spec: MacroGeometrySpec,
  pub grid: Grid,
  pub regions: Vec<Region>,
  /// `x_1 = 0`.
  pub gamma_left: Vec<BoundaryFacet>,
  /// `x_1 = L`.
  pub gamma_right: Vec<BoundaryFacet>,
  /// Remaining boundary.
  pub gamma_side: Vec<BoundaryFacet>,
}

pub fn build_macro_mesh(spec: &MacroGeometrySpec) -> Result<MacroMesh, MeshError> {
  let dim = spec.dim;
  if dim != 2 && dim != 3 {
    return Err(MeshError::GeometryInfeasible(format!("dimension {dim}")));
  }
  if !(spec.length > 0.0 && spec.thickness > 0.0 && spec.porous_height > 0.0 && spec.porous_height <= spec.thickness) {
    return Err(MeshError::GeometryInfeasible("need L > 0 and 0 < h <= a".into()));
  }
  if spec.resolution == 0 {
    return Err(MeshError::ResolutionTooCoarse("resolution 0".into()));
  }
  let res = spec.resolution;
  let mut through: Vec<f64> = (0..=res).map(|i| spec.porous_height * i as f64 / res as f64).collect();
  let elastic = spec.thickness - spec.porous_height;
  if elastic > 1e-12 * spec.thickness {
    for i in 1..=res {
      through.push(spec.porous_height + elastic * i as f64 / res as f64);
    }
  }
  let dz = spec.porous_height / res as f64;
  let nx = spec.elements_along.unwrap_or_else(|| libm::ceil(spec.length / dz).max(1.0) as usize);
  let along: Vec<f64> = (0..=nx).map(|i| spec.length * i as f64 / nx as f64).collect();
  let coords = if dim == 2 {
    vec![along, through]
  } else {
    let nw = 2 * res;
    let width: Vec<f64> = (0..=nw).map(|i| spec.thickness * i as f64 / nw as f64).collect();
    vec![along, width, through]
  };
  let grid = Grid::tensor(dim, &coords);
  let t = dim - 1;
  let regions: Vec<Region> = (0..grid.n_elements())
    .map(|e| if grid.element_center(e)[t] < spec.porous_height { Region::Porous } else { Region::Elastic })
    .collect();
  let none = [false; 3];
  let mut gamma_left = Vec::new();
  let mut gamma_right = Vec::new();
  let mut gamma_side = Vec::new();
  for e in 0..grid.n_elements() {
    for axis in 0..dim {
      for side in 0..2 {
        if grid.neighbor(e, axis, side, &none).is_none() {
          let bf = BoundaryFacet { facet: Facet { elem: e, axis, side }, region: regions[e] };
          match (axis, side) {
            (0, 0) => gamma_left.push(bf),
            (0, 1) => gamma_right.push(bf),
            _ => gamma_side.push(bf),
          }
        }
      }
    }
  }
  Ok(MacroMesh { spec: spec.clone(), grid, regions, gamma_left, gamma_right, gamma_side })
}

impl MacroMesh {
  pub fn dim(&self) -> usize {
    self.grid.dim
  }

  /// Point at fraction `x_p` along the axis of the porous layer.
  pub fn probe_point(&self, xp: f64) -> [f64; 3] {
    assert!((0.0..=1.0).contains(&xp), "probe position outside [0, 1]");
    let mut p = [0.0; 3];
    p[0] = xp * self.spec.length;
    p[self.dim() - 1] = 0.5 * self.spec.porous_height;
    if self.dim() == 3 {
      p[1] = 0.5 * self.spec.thickness;
    }
    p
  }

  pub fn measure_where(&self, region: Region) -> f64 {
    (0..self.regions.len()).filter(|&e| self.regions[e] == region).map(|e| self.grid.element_volume(e)).sum()
  }
}

#[cfg(test)]
mod tests {
  use super::*;

  fn strip(res: usize) -> CellGeometrySpec {
    CellGeometrySpec {
      dim: 2,
      resolution: res,
      channel_radius: 0.125,
      inclusion_radius: 0.0,
      stiff_shell_thickness: 0.0,
      n_compartments: 1,
      membrane_positions: vec![],
      channel_axes: vec![0],
    }
  }

  #[test]
  fn strip_porosity() {
    let m = build_cell_mesh(&strip(16)).unwrap();
    assert!((m.porosity_channel() - 0.25).abs() <= 1.0 / 16.0 + 1e-12);
    assert!(!m.has_inclusion());
  }

  #[test]
  fn subdomain_measures_sum_to_cell() {
    for dim in [2, 3] {
      let m = build_cell_mesh(&CellGeometrySpec::paper_like(dim, 12)).unwrap();
      let parts = [
        m.measure_where(|t| t == Subdomain::SolidSoft),
        m.measure_where(|t| t == Subdomain::SolidStiff),
        m.measure_where(|t| t.is_channel()),
        m.measure_where(|t| t == Subdomain::FluidInclusion),
      ];
      assert!((parts.iter().sum::<f64>() - m.volume()).abs() < 1e-12);
      assert!(parts.iter().all(|&p| p > 0.0));
    }
  }

  #[test]
  fn membrane_plane_clipped_to_channel() {
    let mut s = CellGeometrySpec::paper_like(3, 12);
    s.n_compartments = 2;
    s.membrane_positions = vec![0.5];
    let m = build_cell_mesh(&s).unwrap();
    let n_channel_cross = (0..m.tags.len())
      .filter(|&e| m.tags[e].is_channel() && m.grid.element_coords(e)[0] == 0)
      .count();
    assert_eq!(m.facets.membrane.len(), n_channel_cross);
    for f in &m.facets.membrane {
      assert_eq!(m.tags[f.elem], Subdomain::FluidChannel(0));
      let other = m.grid.neighbor(f.elem, f.axis, f.side, &m.periodic_axes()).unwrap();
      assert_eq!(m.tags[other], Subdomain::FluidChannel(1));
      assert_eq!(m.grid.element_coords(f.elem)[0] + 1, 6);
    }
  }

  #[test]
  fn infeasible_and_coarse_geometries_rejected() {
    let mut s = CellGeometrySpec::paper_like(2, 16);
    s.inclusion_radius = 0.45;
    assert!(matches!(build_cell_mesh(&s), Err(MeshError::GeometryInfeasible(_))));
    assert!(matches!(build_cell_mesh(&strip(3)), Err(MeshError::ResolutionTooCoarse(_))));
    let mut s = strip(8);
    s.channel_radius = 0.01;
    assert!(matches!(build_cell_mesh(&s), Err(MeshError::ResolutionTooCoarse(_))));
  }

  #[test]
  fn periodic_pairing_is_an_involution() {
    let m = build_cell_mesh(&CellGeometrySpec::paper_like(2, 8)).unwrap();
    for &(a, b, axis) in &m.periodic_pairs {
      assert_eq!(m.periodic_partner(a, axis), Some(b));
      assert_eq!(m.periodic_partner(b, axis), Some(a));
      let (xa, xb) = (m.grid.vertices[a], m.grid.vertices[b]);
      assert!((xb[axis] - xa[axis] - 1.0).abs() < 1e-14);
    }
  }

  #[test]
  fn macro_layers() {
    let spec = MacroGeometrySpec { dim: 2, length: 1.0, thickness: 1.0, porous_height: 0.5, resolution: 2, elements_along: None };
    let m = build_macro_mesh(&spec).unwrap();
    assert_eq!(m.grid.n[1], 4);
    assert!((m.measure_where(Region::Porous) - 0.5).abs() < 1e-14);
    assert!((m.measure_where(Region::Elastic) - 0.5).abs() < 1e-14);
    assert_eq!(m.gamma_left.len(), 4);
    let p = m.probe_point(0.5);
    assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    let (e, _) = m.grid.locate(&p).unwrap();
    assert_eq!(m.regions[e], Region::Porous);
  }
}
