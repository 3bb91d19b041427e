//! Direct simulation of the heterogeneous medium on a row of cells: solid
//! elasticity, Stokes flow in the channels, one pressure per inclusion and
//! valves concentrated on one channel wall facet each.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fem::assemble::QuadSet;
use crate::fem::dofmap::canonical;
use crate::fem::element::{eval_basis, n_local, FacetGeometry};
use crate::fem::{DofMap, DofMapSpec, LuFactor, Slot, SolveError, SparseMatrix, Triplets};
use crate::macro_solver::{valve_switch, NewtonSettings, TimeFunction, ValveParams};
use crate::materials::Materials;
use crate::mesh::{CellMesh, Facet, Grid, Subdomain};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DnsError {
  #[error("geometry infeasible: {0}")]
  GeometryInfeasible(String),
  #[error("linear solver failed at t = {t}: {source}")]
  Solver { t: f64, source: SolveError },
  #[error("Newton diverged at t = {t} after {iterations} iterations (last increment {increment:e}, open valves {open_valves})")]
  NewtonDiverged { t: f64, iterations: usize, increment: f64, open_valves: usize },
}

/// Row of `n_cells` cells along the first axis, each scaled by `eps0`.
#[derive(Clone, Debug)]
pub struct DnsSystem {
  pub dim: usize,
  pub n_cells: usize,
  pub eps0: f64,
  pub cell_resolution: usize,
  pub grid: Grid,
  pub tags: Vec<Subdomain>,
  /// Bilinear displacement, extended harmonically into the fluid.
  pub u_map: DofMap,
  /// Seepage velocity relative to the extended solid motion.
  pub w_map: DofMap,
  pub p_map: DofMap,
  /// Per inclusion: facets seen from the inclusion and the enclosed volume.
  pub inclusions: Vec<(Vec<Facet>, f64)>,
  /// Per inclusion: weights of the valve facet average over free `p_f` unknowns.
  pub valve_weights: Vec<Vec<(usize, f64)>>,
  /// Per-valve conductances and ejection gauge.
  pub valves: ValveParams,
  pub dt: f64,
  pub gamma: f64,
  stiffness: SparseMatrix,
  rate: SparseMatrix,
  /// Residual contribution of a unit channel pressure on the loaded end.
  unit_load: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnsState {
  pub t: f64,
  /// `[u | w | p_f | p_c]` free unknowns.
  pub x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnsStep {
  pub t: f64,
  pub iterations: usize,
  pub increment: f64,
  pub open_admission: usize,
  pub open_ejection: usize,
  /// Exchange terms leaving the channels plus those entering the inclusions.
  pub exchange_imbalance: f64,
  /// Worst inclusion mass balance residual relative to its terms.
  pub inclusion_balance: f64,
  pub refactored: bool,
}

/// Values at a DNS probe point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnsProbe {
  pub x: [f64; 3],
  pub u: [f64; 3],
  pub pf: Option<f64>,
  pub w: Option<[f64; 3]>,
}

fn slot_index(s: Slot, off: usize) -> Option<usize> {
  match s {
    Slot::Free(i) => Some(off + i),
    Slot::Fixed(_) => None,
  }
}

impl DnsSystem {
  /// Stacks `n_cells` copies of `cell` along the first axis. `valves` holds
  /// the volumetric conductances of the homogenized model; each inclusion
  /// receives `κ̄ ε₀^dim |Y|`.
  pub fn build(cell: &CellMesh, n_cells: usize, eps0: f64, mats: &Materials, valves: ValveParams, dt: f64) -> Result<Self, DnsError> {
    if n_cells < 2 {
      return Err(DnsError::GeometryInfeasible("at least two cells are needed".into()));
    }
    if !(eps0 > 0.0 && dt > 0.0) {
      return Err(DnsError::GeometryInfeasible("cell size and time step must be positive".into()));
    }
    let dim = cell.dim();
    let r = cell.grid.n[0];
    if (0..dim).any(|a| cell.grid.n[a] != r) {
      return Err(DnsError::GeometryInfeasible("cell grid must be uniform".into()));
    }
    let h = eps0 / r as f64;
    let mut coords: Vec<Vec<f64>> = vec![(0..=n_cells * r).map(|i| i as f64 * h).collect()];
    for _ in 1..dim {
      coords.push((0..=r).map(|i| i as f64 * h).collect());
    }
    let grid = Grid::tensor(dim, &coords);
    let ne = grid.n_elements();
    let local = |e: usize| {
      let mut c = grid.element_coords(e);
      let k = c[0] / r;
      c[0] %= r;
      (k, cell.grid.element_index(c))
    };
    let global = |k: usize, ce: usize| {
      let mut c = cell.grid.element_coords(ce);
      c[0] += k * r;
      grid.element_index(c)
    };
    let tags: Vec<Subdomain> = (0..ne).map(|e| cell.tags[local(e).1]).collect();
    let periodic = [false, true, dim == 3];

    let all: Vec<usize> = (0..ne).collect();
    let channel: Vec<usize> = all.iter().copied().filter(|&e| tags[e].is_channel()).collect();
    let mut solid_nodes = BTreeSet::new();
    for e in (0..ne).filter(|&e| tags[e].is_solid()) {
      for n in grid.element_nodes(e, 2) {
        solid_nodes.insert(canonical(&grid, 2, n, &periodic));
      }
    }
    let ufix = |canon: usize, _k: usize, _c: usize| (grid.lattice_coords(1, canon)[0] == 0).then_some(0.0);
    let u_map = DofMap::new(&grid, &DofMapSpec { order: 1, ncomp: dim, elements: &all, periodic, split: None, fixed: Some(&ufix) });
    let wfix = |canon: usize, _k: usize, _c: usize| solid_nodes.contains(&canon).then_some(0.0);
    let w_map = DofMap::new(&grid, &DofMapSpec { order: 2, ncomp: dim, elements: &channel, periodic, split: None, fixed: Some(&wfix) });
    let p_map = DofMap::new(&grid, &DofMapSpec { order: 1, ncomp: 1, elements: &channel, periodic, split: None, fixed: None });

    // Inclusions, one per cell.
    let cell_volume = (0..cell.grid.n_elements()).filter(|&e| cell.tags[e] == Subdomain::FluidInclusion).map(|e| cell.grid.element_volume(e)).sum::<f64>();
    let mut inclusions: Vec<(Vec<Facet>, f64)> = Vec::new();
    let mut valve_facets: Vec<Facet> = Vec::new();
    if cell_volume > 0.0 {
      // Channel wall facet closest to the inclusion centre carries the valves.
      let centre = [0.5, 0.5, if dim == 3 { 0.5 } else { 0.0 }];
      let facet_centre = |f: &Facet| {
        let mut c = cell.grid.element_center(f.elem);
        c[f.axis] += if f.side == 1 { 0.5 } else { -0.5 } / r as f64;
        c
      };
      let dist = |c: [f64; 3]| (0..dim).map(|a| (c[a] - centre[a]) * (c[a] - centre[a])).sum::<f64>();
      let valve = cell
        .facets
        .fluid_solid
        .iter()
        .min_by(|a, b| dist(facet_centre(a)).partial_cmp(&dist(facet_centre(b))).unwrap())
        .copied()
        .ok_or_else(|| DnsError::GeometryInfeasible("inclusions without a channel wall for the valves".into()))?;
      let scale = libm::pow(eps0, dim as f64);
      for k in 0..n_cells {
        let fs = cell.facets.inclusion.iter().map(|f| Facet { elem: global(k, f.elem), ..*f }).collect();
        inclusions.push((fs, cell_volume * scale));
        valve_facets.push(Facet { elem: global(k, valve.elem), ..valve });
      }
    }
    let n_inc = inclusions.len();

    let nu = u_map.n_free;
    let nw = w_map.n_free;
    let np = p_map.n_free;
    let off = [0, nu, nu + nw, nu + nw + np];
    let n = off[3] + n_inc;

    let mut touches = vec![false; nu];
    for e in (0..ne).filter(|&e| tags[e].is_solid()) {
      for s in u_map.element_slots(e).unwrap() {
        if let Slot::Free(i) = *s {
          touches[i] = true;
        }
      }
    }

    let quad = QuadSet::new(dim, 3);
    let nb2 = n_local(dim, 2);
    let nb1 = n_local(dim, 1);
    let visc = Tensor4::viscous(dim, mats.viscosity);
    let mut st = Triplets::new(n, n);
    let mut rt = Triplets::new(n, n);
    for e in 0..ne {
      let tag = tags[e];
      let geom = quad.geometry(&grid, e);
      let us = u_map.element_slots(e).unwrap();
      let urow = |a: usize, i: usize| slot_index(us[a * dim + i], off[0]);
      for q in 0..quad.rule.len() {
        let jxw = geom.jxw[q];
        let g1: Vec<[f64; 3]> = (0..nb1).map(|a| geom.phys_grad(q, quad.q1.grad(q, a))).collect();
        if tag.is_solid() {
          let c = mats.solid_tensor(dim, tag);
          push_tensor(&mut st, dim, &c, jxw, (&g1, &urow), (&g1, &urow), |_| true);
          continue;
        }
        // Harmonic extension rows.
        for a in 0..nb1 {
          for i in 0..dim {
            let Some(r) = urow(a, i) else { continue };
            if touches[r] {
              continue;
            }
            for b in 0..nb1 {
              if let Some(c) = urow(b, i) {
                let v: f64 = (0..dim).map(|j| g1[a][j] * g1[b][j]).sum();
                st.push(r, c, jxw * v);
              }
            }
          }
        }
        if !tag.is_channel() {
          continue;
        }
        let ws = w_map.element_slots(e).unwrap();
        let ps = p_map.element_slots(e).unwrap();
        let wrow = |a: usize, i: usize| slot_index(ws[a * dim + i], off[1]);
        let prow = |a: usize| slot_index(ps[a], off[2]);
        let momentum_u = |r: usize| touches[r - off[0]];
        let v1: Vec<f64> = (0..nb1).map(|a| quad.q1.val(q, a)).collect();
        let g2: Vec<[f64; 3]> = (0..nb2).map(|a| geom.phys_grad(q, quad.q2.grad(q, a))).collect();
        // Viscous stress of u̇ + w against u and w tests.
        push_tensor(&mut rt, dim, &visc, jxw / dt, (&g1, &urow), (&g1, &urow), momentum_u);
        push_tensor(&mut st, dim, &visc, jxw, (&g1, &urow), (&g2, &wrow), momentum_u);
        push_tensor(&mut rt, dim, &visc, jxw / dt, (&g2, &wrow), (&g1, &urow), |_| true);
        push_tensor(&mut st, dim, &visc, jxw, (&g2, &wrow), (&g2, &wrow), |_| true);
        for b in 0..nb1 {
          let Some(pc) = prow(b) else { continue };
          for i in 0..dim {
            for a in 0..nb1 {
              if let Some(r) = urow(a, i) {
                let d = jxw * g1[a][i] * v1[b];
                if touches[r] {
                  st.push(r, pc, -d);
                }
                rt.push(pc, r, d);
              }
            }
            for a in 0..nb2 {
              if let Some(r) = wrow(a, i) {
                let d = jxw * g2[a][i] * v1[b];
                st.push(r, pc, -d);
                st.push(pc, r, dt * d);
              }
            }
          }
        }
        for a in 0..nb1 {
          let Some(r) = prow(a) else { continue };
          for b in 0..nb1 {
            if let Some(c) = prow(b) {
              rt.push(r, c, jxw * mats.gamma * v1[a] * v1[b]);
            }
          }
        }
      }
    }

    // Inclusion pressures on the inclusion walls.
    for (k, (facets, vol)) in inclusions.iter().enumerate() {
      let pk = off[3] + k;
      rt.push(pk, pk, vol * mats.gamma);
      for f in facets {
        let fq = QuadSet::face(dim, 3, f.axis, f.side);
        let fg = FacetGeometry::new(dim, &grid.element_vertex_coords(f.elem), f.axis, f.side, &fq.rule, &fq.geo);
        let us = u_map.element_slots(f.elem).unwrap();
        for q in 0..fq.rule.len() {
          for a in 0..nb1 {
            for i in 0..dim {
              let Some(r) = slot_index(us[a * dim + i], off[0]) else { continue };
              let v = fg.sxw[q] * fq.q1.val(q, a) * fg.normal[q][i];
              if v != 0.0 {
                st.push(r, pk, -v);
                rt.push(pk, r, v);
              }
            }
          }
        }
      }
    }

    // Reservoir pressure on the whole loaded end.
    let mut unit_load = vec![0.0; n];
    let last = grid.n[0] - 1;
    let fq = QuadSet::face(dim, 3, 0, 1);
    for e in (0..ne).filter(|&e| grid.element_coords(e)[0] == last && tags[e] != Subdomain::FluidInclusion) {
      let fg = FacetGeometry::new(dim, &grid.element_vertex_coords(e), 0, 1, &fq.rule, &fq.geo);
      let us = u_map.element_slots(e).unwrap();
      let ws = w_map.element_slots(e);
      for q in 0..fq.rule.len() {
        for i in 0..dim {
          for a in 0..nb1 {
            if let Some(r) = slot_index(us[a * dim + i], off[0]) {
              if touches[r] {
                unit_load[r] += fg.sxw[q] * fq.q1.val(q, a) * fg.normal[q][i];
              }
            }
          }
          for a in 0..nb2 {
            if let Some(r) = ws.and_then(|ws| slot_index(ws[a * dim + i], off[1])) {
              unit_load[r] += fg.sxw[q] * fq.q2.val(q, a) * fg.normal[q][i];
            }
          }
        }
      }
    }

    let mut valve_weights = Vec::new();
    for f in &valve_facets {
      let fq = QuadSet::face(dim, 3, f.axis, f.side);
      let fg = FacetGeometry::new(dim, &grid.element_vertex_coords(f.elem), f.axis, f.side, &fq.rule, &fq.geo);
      let area: f64 = fg.sxw.iter().sum();
      let ps = p_map.element_slots(f.elem).unwrap();
      let mut w = Vec::new();
      for a in 0..nb1 {
        let v: f64 = (0..fq.rule.len()).map(|q| fg.sxw[q] * fq.q1.val(q, a)).sum::<f64>() / area;
        if let Slot::Free(i) = ps[a] {
          if v != 0.0 {
            w.push((off[2] + i, v));
          }
        }
      }
      valve_weights.push(w);
    }

    let per_valve = libm::pow(eps0, dim as f64);
    Ok(Self {
      dim,
      n_cells,
      eps0,
      cell_resolution: r,
      grid,
      tags,
      u_map,
      w_map,
      p_map,
      inclusions,
      valve_weights,
      valves: ValveParams { kappa_a: valves.kappa_a * per_valve, kappa_e: valves.kappa_e * per_valve, delta_p: valves.delta_p },
      dt,
      gamma: mats.gamma,
      stiffness: st.to_csr(),
      rate: rt.to_csr(),
      unit_load,
    })
  }

  pub fn n_unknowns(&self) -> usize {
    self.stiffness.n_rows
  }

  pub fn length(&self) -> f64 {
    self.eps0 * self.n_cells as f64
  }

  fn offsets(&self) -> [usize; 4] {
    let (nu, nw, np) = (self.u_map.n_free, self.w_map.n_free, self.p_map.n_free);
    [0, nu, nu + nw, nu + nw + np]
  }

  pub fn initial_state(&self) -> DnsState {
    DnsState { t: 0.0, x: vec![0.0; self.n_unknowns()] }
  }

  /// Inclusion pressures.
  pub fn inclusion_pressures<'a>(&self, s: &'a DnsState) -> &'a [f64] {
    &s.x[self.offsets()[3]..]
  }

  fn valve_flux(&self, x: &[f64], k: usize) -> (f64, f64, f64, bool, bool) {
    let pf: f64 = self.valve_weights[k].iter().map(|&(i, w)| w * x[i]).sum();
    let pc = x[self.offsets()[3] + k];
    let (wa, we) = self.valves.fluxes(pf, pc);
    let (ga, ge) = valve_switch(pf, pc, self.valves.delta_p);
    (pf, wa, we, ga, ge)
  }

  /// Residual with load `p̄` on the loaded end, plus the valve active set.
  pub fn residual(&self, x: &[f64], prev: &[f64], load: f64) -> (Vec<f64>, Vec<(bool, bool)>, f64) {
    let n = x.len();
    let mut r = self.stiffness.mul_vec(x);
    let dx: Vec<f64> = x.iter().zip(prev).map(|(a, b)| a - b).collect();
    let rd = self.rate.mul_vec(&dx);
    for i in 0..n {
      r[i] += rd[i] + load * self.unit_load[i];
    }
    let off = self.offsets();
    let mut active = Vec::with_capacity(self.inclusions.len());
    let (mut sum, mut mag) = (0.0, 0.0);
    for k in 0..self.inclusions.len() {
      let (_, wa, we, ga, ge) = self.valve_flux(x, k);
      let flux = self.dt * (wa - we);
      let mut leaving = 0.0;
      for &(i, w) in &self.valve_weights[k] {
        r[i] += flux * w;
        leaving += flux * w;
      }
      r[off[3] + k] -= flux;
      sum += leaving - flux;
      mag += flux.abs();
      active.push((ga, ge));
    }
    (r, active, if mag > 0.0 { sum.abs() / mag } else { 0.0 })
  }

  /// Jacobian for a given valve active set.
  pub fn jacobian(&self, active: &[(bool, bool)]) -> SparseMatrix {
    let n = self.n_unknowns();
    let mut t = Triplets::new(n, n);
    t.push_block(0, 0, 1.0, &self.stiffness);
    t.push_block(0, 0, 1.0, &self.rate);
    let off = self.offsets();
    for (k, &(ga, ge)) in active.iter().enumerate() {
      let d = self.dt * (if ga { self.valves.kappa_a } else { 0.0 } + if ge { self.valves.kappa_e } else { 0.0 });
      if d == 0.0 {
        continue;
      }
      let pk = off[3] + k;
      for &(i, wi) in &self.valve_weights[k] {
        for &(j, wj) in &self.valve_weights[k] {
          t.push(i, j, d * wi * wj);
        }
        t.push(i, pk, -d * wi);
        t.push(pk, i, -d * wi);
      }
      t.push(pk, pk, d);
    }
    t.to_csr()
  }

  fn scaled_norm(&self, dx: &[f64], ns: &NewtonSettings) -> f64 {
    let off = self.offsets();
    let mu = dx[..off[1]].iter().fold(0.0f64, |m, v| m.max(v.abs())) / ns.u_ref;
    // Seepage velocity measured as displacement per time step.
    let mw = dx[off[1]..off[2]].iter().fold(0.0f64, |m, v| m.max(v.abs())) * self.dt / ns.u_ref;
    let mp = dx[off[2]..].iter().fold(0.0f64, |m, v| m.max(v.abs())) / ns.p_ref;
    mu.max(mw).max(mp)
  }

  /// Time loop under channel pressure `load(t)` on the loaded end.
  pub fn time_loop(&self, load: &TimeFunction, t_end: f64, ns: &NewtonSettings, mut observe: impl FnMut(&DnsStep, &DnsState)) -> Result<Vec<DnsStep>, DnsError> {
    let steps = libm::round(t_end / self.dt) as usize;
    let mut s = self.initial_state();
    let mut factor: Option<(Vec<(bool, bool)>, LuFactor)> = None;
    let mut out = Vec::with_capacity(steps);
    for k in 1..=steps {
      let t = k as f64 * self.dt;
      let g = load.eval(t);
      let prev = s.x.clone();
      let mut x = prev.clone();
      let mut done = None;
      let mut refactored = false;
      let mut last = f64::INFINITY;
      let mut open = 0;
      for it in 0..ns.max_iter {
        let (r, active, _) = self.residual(&x, &prev, g);
        open = active.iter().filter(|a| a.0 || a.1).count();
        if factor.as_ref().map_or(true, |(a, _)| *a != active) {
          let lu = LuFactor::new(&self.jacobian(&active), &[]).map_err(|e| DnsError::Solver { t, source: e })?;
          factor = Some((active, lu));
          refactored = true;
        }
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let dx = factor.as_ref().unwrap().1.solve_within(&rhs, 0.0, 1e-8).map_err(|e| DnsError::Solver { t, source: e })?;
        for (a, d) in x.iter_mut().zip(&dx) {
          *a += d;
        }
        last = self.scaled_norm(&dx, ns);
        if last <= ns.tol {
          done = Some(it);
          break;
        }
      }
      let Some(iterations) = done else {
        return Err(DnsError::NewtonDiverged { t, iterations: ns.max_iter, increment: last, open_valves: open });
      };
      let (_, active, imbalance) = self.residual(&x, &prev, g);
      s = DnsState { t, x };
      let rec = DnsStep {
        t,
        iterations,
        increment: last,
        open_admission: active.iter().filter(|a| a.0).count(),
        open_ejection: active.iter().filter(|a| a.1).count(),
        exchange_imbalance: imbalance,
        inclusion_balance: self.inclusion_balance(&s.x, &prev),
        refactored,
      };
      observe(&rec, &s);
      out.push(rec);
    }
    Ok(out)
  }

  /// `max_k |ΔV_k + |Ω_k|γΔp_k − Δt W_k|` relative to the largest term.
  pub fn inclusion_balance(&self, x: &[f64], prev: &[f64]) -> f64 {
    let off = self.offsets();
    let dx: Vec<f64> = x.iter().zip(prev).map(|(a, b)| a - b).collect();
    let rd = self.rate.mul_vec(&dx);
    let mut worst: f64 = 0.0;
    for k in 0..self.inclusions.len() {
      let (_, wa, we, _, _) = self.valve_flux(x, k);
      let flux = self.dt * (wa - we);
      let a = rd[off[3] + k];
      let storage = self.inclusions[k].1 * self.gamma * dx[off[3] + k];
      let scale = (a - storage).abs().max(storage.abs()).max(flux.abs());
      if scale > 0.0 {
        worst = worst.max((a - flux).abs() / scale);
      }
    }
    worst
  }

  /// Displacement, channel pressure and seepage velocity at a physical point.
  pub fn sample(&self, s: &DnsState, x: &[f64; 3]) -> Option<DnsProbe> {
    let dim = self.dim;
    let (e, xi) = self.grid.locate(x)?;
    let off = self.offsets();
    let nb2 = n_local(dim, 2);
    let nb1 = n_local(dim, 1);
    let mut v2 = vec![0.0; nb2];
    let mut g2 = vec![[0.0; 3]; nb2];
    eval_basis(dim, 2, &xi, &mut v2, &mut g2);
    let val = |sl: Slot, o: usize| match sl {
      Slot::Free(i) => s.x[o + i],
      Slot::Fixed(_) => 0.0,
    };
    let mut v1 = vec![0.0; nb1];
    let mut g1 = vec![[0.0; 3]; nb1];
    eval_basis(dim, 1, &xi, &mut v1, &mut g1);
    let us = self.u_map.element_slots(e)?;
    let mut u = [0.0; 3];
    for a in 0..nb1 {
      for i in 0..dim {
        u[i] += v1[a] * val(us[a * dim + i], off[0]);
      }
    }
    let (mut pf, mut w) = (None, None);
    if let (Some(ws), Some(ps)) = (self.w_map.element_slots(e), self.p_map.element_slots(e)) {
      pf = Some((0..nb1).map(|a| v1[a] * val(ps[a], off[2])).sum());
      let mut wv = [0.0; 3];
      for a in 0..nb2 {
        for i in 0..dim {
          wv[i] += v2[a] * val(ws[a * dim + i], off[1]);
        }
      }
      w = Some(wv);
    }
    Some(DnsProbe { x: *x, u, pf, w })
  }

  /// Inclusion containing physical abscissa `x1`.
  pub fn inclusion_at(&self, x1: f64) -> Option<usize> {
    if self.inclusions.is_empty() || !(0.0..=self.length()).contains(&x1) {
      return None;
    }
    Some(((x1 / self.eps0) as usize).min(self.n_cells - 1))
  }
}

#[allow(clippy::too_many_arguments)]
fn push_tensor(
  t: &mut Triplets,
  dim: usize,
  c: &Tensor4,
  jxw: f64,
  (gr, rows): (&[[f64; 3]], &dyn Fn(usize, usize) -> Option<usize>),
  (gc, cols): (&[[f64; 3]], &dyn Fn(usize, usize) -> Option<usize>),
  keep_row: impl Fn(usize) -> bool,
) {
  for a in 0..gr.len() {
    for i in 0..dim {
      let Some(r) = rows(a, i) else { continue };
      if !keep_row(r) {
        continue;
      }
      for b in 0..gc.len() {
        for k in 0..dim {
          let Some(col) = cols(b, k) else { continue };
          let mut v = 0.0;
          for j in 0..dim {
            for l in 0..dim {
              v += gr[a][j] * c.t[i][j][k][l] * gc[b][l];
            }
          }
          if v != 0.0 {
            t.push(r, col, jxw * v);
          }
        }
      }
    }
  }
}

#[cfg(test)]
mod tests {
  use super::*;
  use crate::materials::Isotropic;
  use crate::mesh::{build_cell_mesh, CellGeometrySpec};

  fn cell(inclusion_radius: f64) -> CellMesh {
    build_cell_mesh(&CellGeometrySpec { inclusion_radius, ..CellGeometrySpec::paper_like(2, 8) }).unwrap()
  }

  fn mats() -> Materials {
    Materials { eps0: 0.01, ..Materials::default() }.equalized()
  }

  fn open(kappa: f64) -> ValveParams {
    ValveParams { kappa_a: kappa, kappa_e: kappa, delta_p: 3e6 }
  }

  #[test]
  fn fewer_than_two_cells_are_rejected() {
    assert!(matches!(DnsSystem::build(&cell(0.22), 1, 0.01, &mats(), open(1e-7), 0.01), Err(DnsError::GeometryInfeasible(_))));
  }

  #[test]
  fn smallest_stack_has_one_pressure_per_inclusion() {
    let sys = DnsSystem::build(&cell(0.22), 2, 0.01, &mats(), open(1e-7), 0.01).unwrap();
    assert_eq!(sys.inclusions.len(), 2);
    assert!((sys.length() - 0.02).abs() < 1e-15);
    let s = sys.initial_state();
    assert_eq!(sys.inclusion_pressures(&s).len(), 2);
    assert!(sys.valve_weights.iter().all(|w| (w.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12));
  }

  #[test]
  fn cells_without_inclusions_have_no_inclusion_pressures() {
    let sys = DnsSystem::build(&cell(0.0), 3, 0.01, &mats(), open(1e-7), 0.01).unwrap();
    assert!(sys.inclusions.is_empty());
    assert_eq!(sys.n_unknowns(), sys.u_map.n_free + sys.w_map.n_free + sys.p_map.n_free);
  }

  #[test]
  fn zero_load_keeps_the_rest_state() {
    let sys = DnsSystem::build(&cell(0.22), 2, 0.01, &mats(), open(1e-7), 0.01).unwrap();
    let mut max: f64 = 0.0;
    sys.time_loop(&TimeFunction::Constant { value: 0.0 }, 0.05, &NewtonSettings::default(), |_, s| max = s.x.iter().fold(max, |m, v| m.max(v.abs()))).unwrap();
    assert_eq!(max, 0.0);
  }

  #[test]
  fn valve_exchange_and_inclusion_balance_close_every_step() {
    let valves = ValveParams { delta_p: 1e4, ..open(1e-7) };
    let sys = DnsSystem::build(&cell(0.22), 2, 0.01, &mats(), valves, 0.01).unwrap();
    let load = TimeFunction::Sine { amplitude: 1e6, omega: core::f64::consts::PI };
    let steps = sys.time_loop(&load, 0.2, &NewtonSettings::default(), |_, _| {}).unwrap();
    assert!(steps.iter().any(|r| r.open_ejection > 0));
    for r in &steps {
      assert!(r.exchange_imbalance <= 1e-13, "{r:?}");
      assert!(r.inclusion_balance <= 1e-8, "{r:?}");
    }
  }

  #[test]
  fn closed_valves_leave_only_the_volume_change() {
    let sys = DnsSystem::build(&cell(0.22), 2, 0.01, &mats(), ValveParams::closed(), 0.01).unwrap();
    let load = TimeFunction::Sine { amplitude: 1e6, omega: core::f64::consts::PI };
    let mut pc = Vec::new();
    let steps = sys.time_loop(&load, 0.05, &NewtonSettings::default(), |_, s| pc.push(sys.inclusion_pressures(s).to_vec())).unwrap();
    assert!(steps.iter().all(|r| r.inclusion_balance <= 1e-8), "{steps:?}");
    // The compressed solid squeezes the sealed inclusions.
    assert!(pc.last().unwrap().iter().all(|p| *p != 0.0));
  }

  #[test]
  fn rigid_solid_inclusion_follows_the_valve_relaxation() {
    let rigid = Isotropic { young: 1e14, poisson: 0.3 };
    let mats = Materials { soft: rigid, stiff: rigid, ..mats() };
    let kappa = 1e-7;
    let c = cell(0.22);
    let probe = DnsSystem::build(&c, 2, 0.01, &mats, open(kappa), 1.0).unwrap();
    let tau = probe.inclusions[0].1 * mats.gamma / probe.valves.kappa_a;
    let dt = tau / 200.0;
    let sys = DnsSystem::build(&c, 2, 0.01, &mats, open(kappa), dt).unwrap();
    // The channel drains through the unloaded end, so each valve sees its own constant p̂_f.
    let mut worst: f64 = 0.0;
    sys.time_loop(&TimeFunction::Constant { value: 1e5 }, 3.0 * tau, &NewtonSettings::default(), |r, s| {
      for (k, pc) in sys.inclusion_pressures(s).iter().enumerate() {
        let (pf, ..) = sys.valve_flux(&s.x, k);
        let exact = pf * (1.0 - libm::exp(-r.t / tau));
        worst = worst.max((pc - exact).abs() / pf);
      }
    })
    .unwrap();
    assert!(worst < 0.01, "{worst}");
  }

  #[test]
  fn sample_reports_channel_fields_only_in_the_channel() {
    let sys = DnsSystem::build(&cell(0.22), 2, 0.01, &mats(), open(1e-7), 0.01).unwrap();
    let s = sys.initial_state();
    assert!(sys.sample(&s, &[0.005, 0.0, 0.0]).unwrap().pf.is_some());
    assert!(sys.sample(&s, &[0.005, 0.005, 0.0]).unwrap().pf.is_none());
    assert_eq!(sys.inclusion_at(0.015), Some(1));
  }
}
