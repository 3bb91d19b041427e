//! Degree-of-freedom maps on structured grids.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::fem::element::n_local;
use crate::mesh::Grid;

/// Where a local basis coefficient lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
  /// Index of an unknown.
  Free(usize),
  /// Index into the table of prescribed values.
  Fixed(usize),
}

/// Parameters of [`DofMap::new`].
pub struct DofMapSpec<'a> {
  pub order: usize,
  pub ncomp: usize,
  /// Grid elements carrying the field.
  pub elements: &'a [usize],
  pub periodic: [bool; 3],
  /// Discontinuity key of a node seen from an element; nodes with different
  /// keys get separate unknowns.
  pub split: Option<&'a dyn Fn(usize, usize) -> usize>,
  /// Prescribed value of `(canonical node, key, component)`.
  pub fixed: Option<&'a dyn Fn(usize, usize, usize) -> Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct DofMap {
  pub dim: usize,
  pub order: usize,
  pub ncomp: usize,
  pub n_free: usize,
  pub periodic: [bool; 3],
  /// Whether the field is split across discontinuity keys.
  pub discontinuous: bool,
  pub elements: Vec<usize>,
  /// Position of each grid element in `elements`.
  elem_pos: Vec<Option<usize>>,
  /// `n_local * ncomp` slots per active element, node-major.
  slots: Vec<Slot>,
  pub fixed_values: Vec<f64>,
  /// `(canonical node, key, component)` of each prescribed value.
  pub fixed_keys: Vec<(usize, usize, usize)>,
  /// Slots of each `(canonical node, key)`.
  node_slots: BTreeMap<(usize, usize), Vec<Slot>>,
  lattice: [usize; 3],
}

impl DofMap {
  pub fn new(grid: &Grid, spec: &DofMapSpec) -> Self {
    let nl = n_local(grid.dim, spec.order);
    let lattice = grid.lattice_size(spec.order);
    let mut elem_pos = vec![None; grid.n_elements()];
    let mut slots = Vec::with_capacity(spec.elements.len() * nl * spec.ncomp);
    let mut node_slots: BTreeMap<(usize, usize), Vec<Slot>> = BTreeMap::new();
    let mut fixed_values = Vec::new();
    let mut fixed_keys = Vec::new();
    let mut n_free = 0;
    for (pos, &e) in spec.elements.iter().enumerate() {
      elem_pos[e] = Some(pos);
      for node in grid.element_nodes(e, spec.order) {
        let canon = canonical(grid, spec.order, node, &spec.periodic);
        let key = spec.split.map_or(0, |f| f(e, canon));
        let entry = node_slots.entry((canon, key)).or_insert_with(|| {
          (0..spec.ncomp)
            .map(|c| match spec.fixed.and_then(|f| f(canon, key, c)) {
              Some(v) => {
                fixed_values.push(v);
                fixed_keys.push((canon, key, c));
                Slot::Fixed(fixed_values.len() - 1)
              }
              None => {
                n_free += 1;
                Slot::Free(n_free - 1)
              }
            })
            .collect()
        });
        slots.extend_from_slice(entry);
      }
    }
    Self {
      dim: grid.dim,
      order: spec.order,
      ncomp: spec.ncomp,
      n_free,
      periodic: spec.periodic,
      discontinuous: spec.split.is_some(),
      elements: spec.elements.to_vec(),
      elem_pos,
      slots,
      fixed_values,
      fixed_keys,
      node_slots,
      lattice,
    }
  }

  pub fn n_local(&self) -> usize {
    n_local(self.dim, self.order)
  }

  /// Slots of grid element `e`, node-major, or `None` if `e` is inactive.
  pub fn element_slots(&self, e: usize) -> Option<&[Slot]> {
    let w = self.n_local() * self.ncomp;
    self.elem_pos.get(e).copied().flatten().map(|p| &self.slots[p * w..(p + 1) * w])
  }

  pub fn is_active(&self, e: usize) -> bool {
    self.elem_pos.get(e).copied().flatten().is_some()
  }

  #[inline]
  pub fn value(&self, slot: Slot, x: &[f64]) -> f64 {
    match slot {
      Slot::Free(i) => x[i],
      Slot::Fixed(k) => self.fixed_values[k],
    }
  }

  /// Local coefficients of element `e`.
  pub fn gather(&self, e: usize, x: &[f64]) -> Vec<f64> {
    self.element_slots(e).map(|s| s.iter().map(|&sl| self.value(sl, x)).collect()).unwrap_or_default()
  }

  /// Slots of a node under a given key; the node is canonicalised first.
  pub fn node_slots(&self, grid: &Grid, node: usize, key: usize) -> Option<&[Slot]> {
    let canon = canonical(grid, self.order, node, &self.periodic);
    self.node_slots.get(&(canon, key)).map(|v| v.as_slice())
  }

  /// All `(canonical node, key)` pairs with their slots.
  pub fn nodes(&self) -> impl Iterator<Item = (&(usize, usize), &Vec<Slot>)> {
    self.node_slots.iter()
  }

  /// Recomputes prescribed values.
  pub fn update_fixed(&mut self, f: impl Fn(usize, usize, usize) -> f64) {
    for (k, &(n, key, c)) in self.fixed_keys.iter().enumerate() {
      self.fixed_values[k] = f(n, key, c);
    }
  }

  pub fn lattice_size(&self) -> [usize; 3] {
    self.lattice
  }

  /// Indicator vectors of the connected components of component `comp`,
  /// connectivity taken through shared element unknowns.
  pub fn component_indicators(&self, comp: usize) -> Vec<Vec<f64>> {
    let mut parent: Vec<usize> = (0..self.n_free).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
      while p[i] != i {
        p[i] = p[p[i]];
        i = p[i];
      }
      i
    }
    let w = self.n_local() * self.ncomp;
    let mut used = vec![false; self.n_free];
    for chunk in self.slots.chunks(w) {
      let mut first = None;
      for a in 0..self.n_local() {
        if let Slot::Free(i) = chunk[a * self.ncomp + comp] {
          used[i] = true;
          match first {
            None => first = Some(i),
            Some(f) => {
              let (ra, rb) = (find(&mut parent, f), find(&mut parent, i));
              if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
              }
            }
          }
        }
      }
    }
    let mut roots: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for i in 0..self.n_free {
      if used[i] {
        let r = find(&mut parent, i);
        roots.entry(r).or_insert_with(|| vec![0.0; self.n_free])[i] = 1.0;
      }
    }
    roots.into_values().collect()
  }

  /// Indicator of all unknowns of component `comp`.
  pub fn component_mask(&self, comp: usize) -> Vec<f64> {
    let mut out = vec![0.0; self.n_free];
    for s in self.node_slots.values() {
      if let Slot::Free(i) = s[comp] {
        out[i] = 1.0;
      }
    }
    out
  }
}

/// Lattice node with periodic images folded onto the minus faces.
pub fn canonical(grid: &Grid, order: usize, node: usize, periodic: &[bool; 3]) -> usize {
  let s = grid.lattice_size(order);
  let mut c = grid.lattice_coords(order, node);
  for a in 0..grid.dim {
    if periodic[a] && c[a] == s[a] - 1 {
      c[a] = 0;
    }
  }
  grid.lattice_index(order, c)
}

#[cfg(test)]
mod tests {
  use super::*;

  #[test]
  fn periodic_q2_counts() {
    let g = Grid::uniform(2, 4);
    let elems: Vec<usize> = (0..16).collect();
    let spec = DofMapSpec { order: 2, ncomp: 2, elements: &elems, periodic: [true, true, false], split: None, fixed: None };
    let m = DofMap::new(&g, &spec);
    assert_eq!(m.n_free, 8 * 8 * 2);
    let spec = DofMapSpec { order: 1, ncomp: 1, elements: &elems, periodic: [false; 3], split: None, fixed: None };
    assert_eq!(DofMap::new(&g, &spec).n_free, 25);
  }

  #[test]
  fn split_duplicates_plane_nodes() {
    let g = Grid::uniform(2, 4);
    let elems: Vec<usize> = (0..16).collect();
    let split = |e: usize, node: usize| {
      let on_plane = g.lattice_coords(1, node)[0] == 2;
      if on_plane {
        usize::from(g.element_coords(e)[0] >= 2)
      } else {
        0
      }
    };
    let spec = DofMapSpec { order: 1, ncomp: 1, elements: &elems, periodic: [true, true, false], split: Some(&split), fixed: None };
    let m = DofMap::new(&g, &spec);
    assert_eq!(m.n_free, 16 + 4);
    assert_eq!(m.component_indicators(0).len(), 1);
  }

  #[test]
  fn fixed_values_update() {
    let g = Grid::uniform(2, 2);
    let elems: Vec<usize> = (0..4).collect();
    let fix = |n: usize, _k: usize, _c: usize| if g.lattice_coords(1, n)[0] == 0 { Some(1.0) } else { None };
    let spec = DofMapSpec { order: 1, ncomp: 1, elements: &elems, periodic: [false; 3], split: None, fixed: Some(&fix) };
    let mut m = DofMap::new(&g, &spec);
    assert_eq!(m.n_free, 6);
    assert_eq!(m.fixed_values, vec![1.0; 3]);
    m.update_fixed(|_, _, _| 2.0);
    assert_eq!(m.gather(0, &[0.0; 6])[0], 2.0);
  }
}
