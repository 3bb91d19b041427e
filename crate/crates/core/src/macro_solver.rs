//! Time stepping of the macroscopic two-pressure Biot model with admission
//! and ejection valves, with constant coefficients (L-model) or with the
//! deformation-dependent coefficients of the sensitivity expansion (E-model).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fem::assemble::QuadSet;
use crate::fem::element::{eval_basis, n_local};
use crate::fem::{DofMap, DofMapSpec, LuFactor, Slot, SolveError, Triplets};
use crate::homogenize::HomogenizedCoefficients;
use crate::mesh::{MacroMesh, Region};
use crate::micro_cell::Pore;
use crate::sensitivity::{point_response, tangent_coefficients, CoefficientSensitivities, PointState, TangentSet};
use crate::tensor::{Mat, Tensor4};

/// Relative residual accepted from the linear solve inside Newton.
const LINEAR_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MacroError {
  #[error("invalid problem: {0}")]
  InvalidConfig(String),
  #[error("E-model needs coefficient sensitivities")]
  MissingSensitivities,
  #[error("non-finite residual at t = {t}")]
  NonFiniteResidual { t: f64 },
  #[error("singular tangent at t = {t} with {open_valves} open valves: {source}")]
  SingularTangent { t: f64, open_valves: usize, source: SolveError },
  #[error("Newton diverged at t = {t} after {iterations} iterations (last increment {increment:e})")]
  NewtonDiverged { t: f64, iterations: usize, increment: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Model {
  /// Coefficients of the reference configuration.
  #[default]
  L,
  /// Coefficients following the local strain and pressures.
  E,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValveParams {
  /// Admission permeability `κ̄_A` [1/(Pa s)].
  pub kappa_a: f64,
  /// Ejection permeability `κ̄_E` [1/(Pa s)].
  pub kappa_e: f64,
  /// Ejection gauge `ΔP` [Pa].
  pub delta_p: f64,
}

impl ValveParams {
  pub fn closed() -> Self {
    Self { kappa_a: 0.0, kappa_e: 0.0, delta_p: 0.0 }
  }

  pub fn validate(&self) -> Result<(), MacroError> {
    if !(self.kappa_a >= 0.0 && self.kappa_e >= 0.0 && self.delta_p >= 0.0) {
      return Err(MacroError::InvalidConfig("valve parameters must be nonnegative".into()));
    }
    Ok(())
  }

  /// `(w_A, w_E)`.
  pub fn fluxes(&self, pf: f64, pc: f64) -> (f64, f64) {
    (self.kappa_a * (pf - pc).max(0.0), self.kappa_e * (pc - pf - self.delta_p).max(0.0))
  }
}

/// Open state `(γ_A, γ_E)` of the admission and ejection valves.
pub fn valve_switch(pf: f64, pc: f64, delta_p: f64) -> (bool, bool) {
  (pf - pc > 0.0, pc - pf - delta_p > 0.0)
}

/// Time history of a prescribed value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeFunction {
  Constant { value: f64 },
  /// `amplitude · sin²(kπt) · exp(−(t−c)²/2b²) / √(2πb²)`.
  GaussianSine { amplitude: f64, k: f64, b: f64, c: f64 },
  /// `peak · f_R(t)`: ramp to `peak` until `t1`, hold, then ramp down by
  /// `drop · peak` between `t2` and `t3` and hold again.
  RampHold { peak: f64, t1: f64, t2: f64, t3: f64, drop: f64 },
  /// `amplitude · sin(ωt)`.
  Sine { amplitude: f64, omega: f64 },
  /// Piecewise constant: `values[i]` from `times[i]` on; zero before `times[0]`.
  Steps { times: Vec<f64>, values: Vec<f64> },
  /// Piecewise linear interpolation, constant beyond the ends.
  Table { times: Vec<f64>, values: Vec<f64> },
}

impl TimeFunction {
  pub fn eval(&self, t: f64) -> f64 {
    match self {
      TimeFunction::Constant { value } => *value,
      TimeFunction::GaussianSine { amplitude, k, b, c } => {
        let s = libm::sin(k * core::f64::consts::PI * t);
        amplitude * s * s * libm::exp(-(t - c) * (t - c) / (2.0 * b * b)) / libm::sqrt(2.0 * core::f64::consts::PI * b * b)
      }
      TimeFunction::RampHold { peak, t1, t2, t3, drop } => {
        let h = |x: f64| if x > 0.0 { 1.0 } else { 0.0 };
        let up = t / t1 - (t - t1) * h(t - t1) / t1;
        let down = (t - t2) / (t3 - t2) - (t - t3) * h(t - t3) / (t3 - t2);
        peak * (up - drop * down * h(t - t2))
      }
      TimeFunction::Sine { amplitude, omega } => amplitude * libm::sin(omega * t),
      TimeFunction::Steps { times, values } => times.iter().zip(values).filter(|(ti, _)| **ti <= t).last().map_or(0.0, |(_, v)| *v),
      TimeFunction::Table { times, values } => {
        if times.is_empty() {
          return 0.0;
        }
        if t <= times[0] {
          return values[0];
        }
        for i in 1..times.len() {
          if t <= times[i] {
            let s = (t - times[i - 1]) / (times[i] - times[i - 1]);
            return values[i - 1] + s * (values[i] - values[i - 1]);
          }
        }
        values[values.len() - 1]
      }
    }
  }

  fn validate(&self) -> Result<(), MacroError> {
    let bad = |s: &str| Err(MacroError::InvalidConfig(s.into()));
    match self {
      TimeFunction::RampHold { t1, t2, t3, .. } if !(*t1 > 0.0 && t2 >= t1 && t3 > t2) => bad("ramp times must satisfy 0 < t1 <= t2 < t3"),
      TimeFunction::GaussianSine { b, .. } if *b <= 0.0 => bad("gaussian width must be positive"),
      TimeFunction::Steps { times, values } | TimeFunction::Table { times, values } => {
        if times.len() != values.len() || times.windows(2).any(|w| w[0] >= w[1]) {
          bad("tabulated times must increase and match the values")
        } else {
          Ok(())
        }
      }
      _ => Ok(()),
    }
  }
}

/// Boundary part of the macroscopic domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
  Left,
  Right,
  Side,
  /// Every node of the field.
  All,
}

/// Zero displacement of the listed components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementBc {
  pub boundary: Boundary,
  pub components: Vec<usize>,
}

/// Prescribed pore pressure on the porous part of a boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PressureBc {
  pub boundary: Boundary,
  pub pore: Pore,
  pub value: TimeFunction,
}

/// Surface traction `value(t) · direction`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TractionBc {
  pub boundary: Boundary,
  pub direction: [f64; 3],
  pub value: TimeFunction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadProgram {
  pub dt: f64,
  pub t_end: f64,
  pub displacement: Vec<DisplacementBc>,
  pub pressure: Vec<PressureBc>,
  #[serde(default)]
  pub traction: Vec<TractionBc>,
}

impl LoadProgram {
  pub fn n_steps(&self) -> usize {
    libm::round(self.t_end / self.dt) as usize
  }

  pub fn validate(&self, dim: usize) -> Result<(), MacroError> {
    if !(self.dt > 0.0 && self.dt.is_finite() && self.t_end > 0.0) {
      return Err(MacroError::InvalidConfig("time step and horizon must be positive".into()));
    }
    if self.displacement.iter().any(|d| d.components.iter().any(|&c| c >= dim)) {
      return Err(MacroError::InvalidConfig("displacement component out of range".into()));
    }
    for p in &self.pressure {
      p.value.validate()?;
    }
    for t in &self.traction {
      t.value.validate()?;
    }
    Ok(())
  }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewtonSettings {
  pub tol: f64,
  pub max_iter: usize,
  /// Displacement scale of the convergence norm [m].
  pub u_ref: f64,
  /// Pressure scale of the convergence norm [Pa].
  pub p_ref: f64,
  /// Period-2 active-set cycles tolerated before damping.
  pub chatter_cycles: usize,
}

impl Default for NewtonSettings {
  fn default() -> Self {
    Self { tol: 1e-8, max_iter: 25, u_ref: 1e-3, p_ref: 1e6, chatter_cycles: 5 }
  }
}

/// Everything the macroscopic solver needs.
#[derive(Clone, Debug)]
pub struct MacroProblem {
  pub mesh: MacroMesh,
  /// Coefficients of the porous region, in the macroscopic dimension.
  pub porous: HomogenizedCoefficients,
  pub sensitivities: Option<CoefficientSensitivities>,
  /// Elasticity of the substrate.
  pub substrate: Tensor4,
  pub valves: ValveParams,
  pub model: Model,
  pub loads: LoadProgram,
  pub newton: NewtonSettings,
}

/// Nodal unknowns of the three fields; prescribed values live in the maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroState {
  pub t: f64,
  pub u: Vec<f64>,
  pub pf: Vec<f64>,
  pub pc: Vec<f64>,
  /// Prescribed values of the three maps at `t`.
  pub fixed: [Vec<f64>; 3],
}

/// Interpolated values at a probe point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
  pub xp: f64,
  pub pf: f64,
  pub pc: f64,
  pub u: [f64; 3],
  pub w_a: f64,
  pub w_e: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
  pub t: f64,
  pub iterations: usize,
  /// Scaled norm of the last increment.
  pub increment: f64,
  /// Infinity norm of the final residual.
  pub residual: f64,
  pub damped: bool,
  /// `|Σ channel valve terms + Σ inclusion valve terms|` over the magnitude.
  pub exchange_imbalance: f64,
  pub open_admission: usize,
  pub open_ejection: usize,
  pub probes: Vec<ProbeSample>,
}

/// Degrees of freedom and assembly of a macroscopic problem.
pub struct MacroSystem {
  pub problem: MacroProblem,
  pub u_map: DofMap,
  pub pf_map: DofMap,
  pub pc_map: DofMap,
  quad: QuadSet,
  /// Lumped weights `∫ N_i` of the pressure nodes, by canonical node.
  lumped: Vec<(usize, f64)>,
  /// Pressure program index per fixed key, for both pressure maps.
  pressure_sources: [Vec<Option<usize>>; 2],
}

/// Nodes on a boundary part, restricted to facets of the given regions.
fn boundary_nodes(mesh: &MacroMesh, b: Boundary, porous_only: bool) -> Vec<usize> {
  let grid = &mesh.grid;
  let mut out = Vec::new();
  let keep = |r: Region| !porous_only || r == Region::Porous;
  match b {
    Boundary::All => {
      for e in 0..grid.n_elements() {
        if keep(mesh.regions[e]) {
          out.extend(grid.element_nodes(e, 1));
        }
      }
    }
    _ => {
      let set = match b {
        Boundary::Left => &mesh.gamma_left,
        Boundary::Right => &mesh.gamma_right,
        _ => &mesh.gamma_side,
      };
      for f in set.iter().filter(|f| keep(f.region)) {
        out.extend(grid.face_nodes(f.facet.elem, 1, f.facet.axis, f.facet.side));
      }
    }
  }
  out.sort_unstable();
  out.dedup();
  out
}

#[inline]
fn slot_value(slot: Slot, free: &[f64], fixed: &[f64]) -> f64 {
  match slot {
    Slot::Free(i) => free[i],
    Slot::Fixed(k) => fixed[k],
  }
}

impl MacroSystem {
  pub fn new(problem: MacroProblem) -> Result<Self, MacroError> {
    let mesh = &problem.mesh;
    let dim = mesh.dim();
    if problem.porous.dim != dim || problem.substrate.dim != dim {
      return Err(MacroError::InvalidConfig("coefficient dimension differs from the mesh".into()));
    }
    if problem.model == Model::E {
      match &problem.sensitivities {
        Some(s) if s.dim == dim => {}
        Some(_) => return Err(MacroError::InvalidConfig("sensitivity dimension differs from the mesh".into())),
        None => return Err(MacroError::MissingSensitivities),
      }
    }
    problem.valves.validate()?;
    problem.loads.validate(dim)?;
    let grid = &mesh.grid;
    let all: Vec<usize> = (0..grid.n_elements()).collect();
    let porous: Vec<usize> = all.iter().copied().filter(|&e| mesh.regions[e] == Region::Porous).collect();
    let mut u_fixed: BTreeMap<(usize, usize), ()> = BTreeMap::new();
    for bc in &problem.loads.displacement {
      for n in boundary_nodes(mesh, bc.boundary, false) {
        for &c in &bc.components {
          u_fixed.insert((n, c), ());
        }
      }
    }
    let ufix = |n: usize, _k: usize, c: usize| u_fixed.get(&(n, c)).map(|_| 0.0);
    let u_map = DofMap::new(grid, &DofMapSpec { order: 1, ncomp: dim, elements: &all, periodic: [false; 3], split: None, fixed: Some(&ufix) });
    let mut source = [BTreeMap::new(), BTreeMap::new()];
    for (i, bc) in problem.loads.pressure.iter().enumerate() {
      for n in boundary_nodes(mesh, bc.boundary, true) {
        source[bc.pore as usize].insert(n, i);
      }
    }
    let make = |src: &BTreeMap<usize, usize>| {
      let fix = |n: usize, _k: usize, _c: usize| src.get(&n).map(|_| 0.0);
      DofMap::new(grid, &DofMapSpec { order: 1, ncomp: 1, elements: &porous, periodic: [false; 3], split: None, fixed: Some(&fix) })
    };
    let pf_map = make(&source[0]);
    let pc_map = make(&source[1]);
    let pressure_sources = [
      pf_map.fixed_keys.iter().map(|&(n, _, _)| source[0].get(&n).copied()).collect(),
      pc_map.fixed_keys.iter().map(|&(n, _, _)| source[1].get(&n).copied()).collect(),
    ];
    let quad = QuadSet::new(dim, 2);
    let mut weights: BTreeMap<usize, f64> = BTreeMap::new();
    for &e in &porous {
      let geom = quad.geometry(grid, e);
      for (a, n) in grid.element_nodes(e, 1).into_iter().enumerate() {
        let w: f64 = (0..quad.rule.len()).map(|q| quad.q1.val(q, a) * geom.jxw[q]).sum();
        *weights.entry(n).or_insert(0.0) += w;
      }
    }
    Ok(Self { problem, u_map, pf_map, pc_map, quad, lumped: weights.into_iter().collect(), pressure_sources })
  }

  pub fn dim(&self) -> usize {
    self.problem.mesh.dim()
  }

  pub fn n_unknowns(&self) -> usize {
    self.u_map.n_free + self.pf_map.n_free + self.pc_map.n_free
  }

  /// Prescribed values at time `t`.
  pub fn fixed_values(&self, t: f64) -> [Vec<f64>; 3] {
    let p = &self.problem.loads.pressure;
    let eval = |src: &[Option<usize>]| src.iter().map(|s| s.map_or(0.0, |i| p[i].value.eval(t))).collect();
    [vec![0.0; self.u_map.fixed_values.len()], eval(&self.pressure_sources[0]), eval(&self.pressure_sources[1])]
  }

  /// Zero initial state.
  pub fn initial_state(&self) -> MacroState {
    MacroState {
      t: 0.0,
      u: vec![0.0; self.u_map.n_free],
      pf: vec![0.0; self.pf_map.n_free],
      pc: vec![0.0; self.pc_map.n_free],
      fixed: self.fixed_values(0.0),
    }
  }

  fn offsets(&self) -> [usize; 3] {
    [0, self.u_map.n_free, self.u_map.n_free + self.pf_map.n_free]
  }

  /// Residual and, if requested, its Jacobian at `s` with history `prev`.
  pub fn assemble(&self, s: &MacroState, prev: &MacroState, with_tangent: bool) -> (Vec<f64>, Option<Triplets>, ValveSummary) {
    let pr = &self.problem;
    let mesh = &pr.mesh;
    let grid = &mesh.grid;
    let dim = self.dim();
    let dt = pr.loads.dt;
    let off = self.offsets();
    let n = self.n_unknowns();
    let mut res = vec![0.0; n];
    let mut jac = if with_tangent { Some(Triplets::new(n, n)) } else { None };
    let nb = n_local(dim, 1);
    let constant = |h: &HomogenizedCoefficients| TangentSet { c: h.a.clone(), b: h.b, d: h.b, m: h.m, k: h.k, g: [Mat::zeros(dim); 3], q: [[0.0; 3]; 2] };
    let l_tangent = constant(&pr.porous);

    for e in 0..grid.n_elements() {
      let geom = self.quad.geometry(grid, e);
      let us = self.u_map.element_slots(e).unwrap();
      let uc: Vec<f64> = us.iter().map(|&sl| slot_value(sl, &s.u, &s.fixed[0])).collect();
      let up: Vec<f64> = us.iter().map(|&sl| slot_value(sl, &prev.u, &prev.fixed[0])).collect();
      let porous = mesh.regions[e] == Region::Porous;
      let (ps, pcur, pprev) = if porous {
        let sf = self.pf_map.element_slots(e).unwrap();
        let sc = self.pc_map.element_slots(e).unwrap();
        let cur: [Vec<f64>; 2] = [
          sf.iter().map(|&sl| slot_value(sl, &s.pf, &s.fixed[1])).collect(),
          sc.iter().map(|&sl| slot_value(sl, &s.pc, &s.fixed[2])).collect(),
        ];
        let old: [Vec<f64>; 2] = [
          sf.iter().map(|&sl| slot_value(sl, &prev.pf, &prev.fixed[1])).collect(),
          sc.iter().map(|&sl| slot_value(sl, &prev.pc, &prev.fixed[2])).collect(),
        ];
        (Some([sf, sc]), cur, old)
      } else {
        (None, [Vec::new(), Vec::new()], [Vec::new(), Vec::new()])
      };
      // Row/column index of local unknowns: displacement (a, i), pressure P at a.
      let urow = |a: usize, i: usize| match us[a * dim + i] {
        Slot::Free(k) => Some(off[0] + k),
        Slot::Fixed(_) => None,
      };
      let prow = |p: usize, a: usize| match ps.as_ref().unwrap()[p][a] {
        Slot::Free(k) => Some(off[1 + p] + k),
        Slot::Fixed(_) => None,
      };
      for q in 0..self.quad.rule.len() {
        let jxw = geom.jxw[q];
        let grads: Vec<[f64; 3]> = (0..nb).map(|a| geom.phys_grad(q, self.quad.q1.grad(q, a))).collect();
        let vals: Vec<f64> = (0..nb).map(|a| self.quad.q1.val(q, a)).collect();
        let strain = |loc: &[f64]| {
          let mut g = Mat::zeros(dim);
          for a in 0..nb {
            for i in 0..dim {
              for j in 0..dim {
                g.m[i][j] += loc[a * dim + i] * grads[a][j];
              }
            }
          }
          g.sym()
        };
        let (ec, ep) = (strain(&uc), strain(&up));
        if !porous {
          let stress = pr.substrate.ddot(&ec);
          for a in 0..nb {
            for i in 0..dim {
              if let Some(r) = urow(a, i) {
                res[r] += jxw * (0..dim).map(|j| stress.m[i][j] * grads[a][j]).sum::<f64>();
              }
            }
          }
          if let Some(t) = jac.as_mut() {
            push_elastic(t, dim, &pr.substrate, jxw, &grads, &urow);
          }
          continue;
        }
        let interp = |loc: &[f64]| (0..nb).map(|a| vals[a] * loc[a]).sum::<f64>();
        let pc_now = [interp(&pcur[0]), interp(&pcur[1])];
        let pc_old = [interp(&pprev[0]), interp(&pprev[1])];
        let mut gp = [0.0; 3];
        for a in 0..nb {
          for j in 0..dim {
            gp[j] += pcur[0][a] * grads[a][j];
          }
        }
        let cur = PointState { strain: ec, p: pc_now };
        let old = PointState { strain: ep, p: pc_old };
        let (resp, tan) = match pr.model {
          Model::L => {
            let h = &pr.porous;
            let stress = h.a.ddot(&ec).axpy(-pc_now[0], &h.b[0]).axpy(-pc_now[1], &h.b[1]);
            let de = ec.sub(&ep);
            let mut storage = [0.0; 2];
            for p in 0..2 {
              storage[p] = h.b[p].ddot(&de) + h.m[p][0] * (pc_now[0] - pc_old[0]) + h.m[p][1] * (pc_now[1] - pc_old[1]);
            }
            let mut flux = [0.0; 3];
            for i in 0..dim {
              for j in 0..dim {
                flux[i] += h.k.m[i][j] * gp[j];
              }
            }
            (crate::sensitivity::PointResponse { stress, storage, flux }, None)
          }
          Model::E => {
            let sens = pr.sensitivities.as_ref().unwrap();
            let r = point_response(&pr.porous, sens, &cur, &old, gp);
            let t = if with_tangent { Some(tangent_coefficients(&pr.porous, sens, &cur, &old, gp)) } else { None };
            (r, t)
          }
        };
        for a in 0..nb {
          for i in 0..dim {
            if let Some(r) = urow(a, i) {
              res[r] += jxw * (0..dim).map(|j| resp.stress.m[i][j] * grads[a][j]).sum::<f64>();
            }
          }
          for p in 0..2 {
            if let Some(r) = prow(p, a) {
              let mut v = vals[a] * resp.storage[p];
              if p == 0 {
                v += dt * (0..dim).map(|j| resp.flux[j] * grads[a][j]).sum::<f64>();
              }
              res[r] += jxw * v;
            }
          }
        }
        if let Some(t) = jac.as_mut() {
          let tan = tan.as_ref().unwrap_or(&l_tangent);
          push_porous(t, dim, tan, dt, jxw, &vals, &grads, &urow, &prow);
        }
      }
    }

    // Tractions on boundary facets.
    for bc in &pr.loads.traction {
      let g = bc.value.eval(s.t);
      if g == 0.0 {
        continue;
      }
      let set = match bc.boundary {
        Boundary::Left => &mesh.gamma_left,
        Boundary::Right => &mesh.gamma_right,
        _ => &mesh.gamma_side,
      };
      for f in set {
        let fq = QuadSet::face(dim, 2, f.facet.axis, f.facet.side);
        let fg = crate::fem::element::FacetGeometry::new(dim, &grid.element_vertex_coords(f.facet.elem), f.facet.axis, f.facet.side, &fq.rule, &fq.geo);
        let us = self.u_map.element_slots(f.facet.elem).unwrap();
        for q in 0..fq.rule.len() {
          for a in 0..nb {
            for i in 0..dim {
              if let Slot::Free(k) = us[a * dim + i] {
                res[off[0] + k] -= fg.sxw[q] * fq.q1.val(q, a) * g * bc.direction[i];
              }
            }
          }
        }
      }
    }

    // Valves, lumped at the pressure nodes; both sides see the same value.
    let mut summary = ValveSummary::default();
    let v = &pr.valves;
    let (mut sum_f, mut sum_c, mut mag) = (0.0, 0.0, 0.0);
    for &(node, w) in &self.lumped {
      let sf = self.pf_map.node_slots(grid, node, 0).unwrap()[0];
      let sc = self.pc_map.node_slots(grid, node, 0).unwrap()[0];
      let (pf, pc) = (slot_value(sf, &s.pf, &s.fixed[1]), slot_value(sc, &s.pc, &s.fixed[2]));
      let (ga, ge) = valve_switch(pf, pc, v.delta_p);
      summary.admission += ga as usize;
      summary.ejection += ge as usize;
      summary.signature.push((ga as u8) | ((ge as u8) << 1));
      let (wa, we) = v.fluxes(pf, pc);
      let term = dt * w * (wa - we);
      let (tf, tc) = (term, -term);
      sum_f += tf;
      sum_c += tc;
      mag += term.abs();
      if let Slot::Free(k) = sf {
        res[off[1] + k] += tf;
      }
      if let Slot::Free(k) = sc {
        res[off[2] + k] += tc;
      }
      if let Some(t) = jac.as_mut() {
        let d = dt * w * (v.kappa_a * ga as u8 as f64 + v.kappa_e * ge as u8 as f64);
        if d != 0.0 {
          let cols = [(sf, 1.0), (sc, -1.0)];
          for (row, sign) in [(sf, 1.0), (sc, -1.0)] {
            let Slot::Free(r) = row else { continue };
            let r = if sign > 0.0 { off[1] + r } else { off[2] + r };
            for (col, cs) in cols {
              let Slot::Free(c) = col else { continue };
              let c = if cs > 0.0 { off[1] + c } else { off[2] + c };
              t.push(r, c, sign * cs * d);
            }
          }
        }
      }
    }
    summary.imbalance = if mag > 0.0 { (sum_f + sum_c).abs() / mag } else { 0.0 };
    (res, jac, summary)
  }

  /// Scaled norm `max(‖δu‖∞/u_ref, ‖δp‖∞/p_ref)`.
  pub fn scaled_norm(&self, x: &[f64]) -> f64 {
    let nu = self.u_map.n_free;
    let s = &self.problem.newton;
    let mu = x[..nu].iter().fold(0.0f64, |m, v| m.max(v.abs())) / s.u_ref;
    let mp = x[nu..].iter().fold(0.0f64, |m, v| m.max(v.abs())) / s.p_ref;
    mu.max(mp)
  }

  fn apply(&self, s: &mut MacroState, dx: &[f64], step: f64) {
    let off = self.offsets();
    for (i, v) in s.u.iter_mut().enumerate() {
      *v += step * dx[off[0] + i];
    }
    for (i, v) in s.pf.iter_mut().enumerate() {
      *v += step * dx[off[1] + i];
    }
    for (i, v) in s.pc.iter_mut().enumerate() {
      *v += step * dx[off[2] + i];
    }
  }

  /// One implicit time step from `prev` to `t`.
  pub fn newton_step(&self, prev: &MacroState, t: f64) -> Result<(MacroState, StepRecord), MacroError> {
    let ns = &self.problem.newton;
    let mut s = prev.clone();
    s.t = t;
    s.fixed = self.fixed_values(t);
    let mut history: Vec<Vec<u8>> = Vec::new();
    let mut cycles = 0;
    let mut damped = false;
    let mut corrections = 0;
    let mut last = f64::INFINITY;
    for _ in 0..ns.max_iter {
      let (res, jac, summary) = self.assemble(&s, prev, true);
      if res.iter().any(|v| !v.is_finite()) {
        return Err(MacroError::NonFiniteResidual { t });
      }
      let n = res.len();
      if history.len() >= 2 && summary.signature == history[history.len() - 2] && summary.signature != history[history.len() - 1] {
        cycles += 1;
        if cycles > ns.chatter_cycles {
          damped = true;
        }
      }
      history.push(summary.signature.clone());
      let dx = if n == 0 {
        Vec::new()
      } else {
        let m = jac.unwrap().to_csr();
        let lu = LuFactor::new(&m, &[]).map_err(|e| MacroError::SingularTangent { t, open_valves: summary.admission + summary.ejection, source: e })?;
        let rhs: Vec<f64> = res.iter().map(|v| -v).collect();
        lu.solve_within(&rhs, 0.0, LINEAR_TOL).map_err(|e| MacroError::SingularTangent { t, open_valves: summary.admission + summary.ejection, source: e })?
      };
      last = if n == 0 { 0.0 } else { self.scaled_norm(&dx) };
      let step = if damped { 0.5 } else { 1.0 };
      self.apply(&mut s, &dx, step);
      if last <= ns.tol {
        let (res, _, summary) = self.assemble(&s, prev, false);
        let record = StepRecord {
          t,
          iterations: corrections,
          increment: last,
          residual: res.iter().fold(0.0f64, |m, v| m.max(v.abs())),
          damped,
          exchange_imbalance: summary.imbalance,
          open_admission: summary.admission,
          open_ejection: summary.ejection,
          probes: Vec::new(),
        };
        return Ok((s, record));
      }
      corrections += 1;
    }
    Err(MacroError::NewtonDiverged { t, iterations: ns.max_iter, increment: last })
  }

  /// Field values at a point of the undeformed mesh.
  pub fn sample(&self, s: &MacroState, x: &[f64; 3]) -> Option<([f64; 3], Option<[f64; 2]>)> {
    let grid = &self.problem.mesh.grid;
    let dim = self.dim();
    let (e, xi) = grid.locate(x)?;
    let nb = n_local(dim, 1);
    let mut vals = vec![0.0; nb];
    let mut grads = vec![[0.0; 3]; nb];
    eval_basis(dim, 1, &xi, &mut vals, &mut grads);
    let us = self.u_map.element_slots(e)?;
    let mut u = [0.0; 3];
    for a in 0..nb {
      for i in 0..dim {
        u[i] += vals[a] * slot_value(us[a * dim + i], &s.u, &s.fixed[0]);
      }
    }
    let p = match (self.pf_map.element_slots(e), self.pc_map.element_slots(e)) {
      (Some(sf), Some(sc)) => {
        let mut p = [0.0; 2];
        for a in 0..nb {
          p[0] += vals[a] * slot_value(sf[a], &s.pf, &s.fixed[1]);
          p[1] += vals[a] * slot_value(sc[a], &s.pc, &s.fixed[2]);
        }
        Some(p)
      }
      _ => None,
    };
    Some((u, p))
  }

  /// Displacement, its gradient `G_ij = ∂_j u_i`, pressures and channel
  /// pressure gradient at a point of the porous region.
  pub fn point_values(&self, s: &MacroState, x: &[f64; 3]) -> Option<PointValues> {
    let grid = &self.problem.mesh.grid;
    let dim = self.dim();
    let (e, xi) = grid.locate(x)?;
    let sf = self.pf_map.element_slots(e)?;
    let sc = self.pc_map.element_slots(e)?;
    let us = self.u_map.element_slots(e)?;
    let nb = n_local(dim, 1);
    let mut vals = vec![0.0; nb];
    let mut rg = vec![[0.0; 3]; nb];
    eval_basis(dim, 1, &xi, &mut vals, &mut rg);
    let verts = grid.element_vertex_coords(e);
    let (jac, _) = element_jacobian(dim, &verts, &xi);
    let inv = jac.inverse()?;
    let mut g = Mat::zeros(dim);
    let mut u = [0.0; 3];
    let mut p = [0.0; 2];
    let mut gp = [0.0; 3];
    for a in 0..nb {
      let mut d = [0.0; 3];
      for j in 0..dim {
        for k in 0..dim {
          d[j] += inv.m[k][j] * rg[a][k];
        }
      }
      for i in 0..dim {
        let v = slot_value(us[a * dim + i], &s.u, &s.fixed[0]);
        u[i] += vals[a] * v;
        for j in 0..dim {
          g.m[i][j] += v * d[j];
        }
      }
      let pf = slot_value(sf[a], &s.pf, &s.fixed[1]);
      p[0] += vals[a] * pf;
      p[1] += vals[a] * slot_value(sc[a], &s.pc, &s.fixed[2]);
      for j in 0..dim {
        gp[j] += pf * d[j];
      }
    }
    Some(PointValues { u, grad_u: g, p, grad_pf: gp })
  }

  pub fn probe(&self, s: &MacroState, xp: f64) -> Option<ProbeSample> {
    let x = self.problem.mesh.probe_point(xp);
    let (u, p) = self.sample(s, &x)?;
    let p = p?;
    let (w_a, w_e) = self.problem.valves.fluxes(p[0], p[1]);
    Some(ProbeSample { xp, pf: p[0], pc: p[1], u, w_a, w_e })
  }

  /// Nodal values on the grid vertices; pressures are `None` outside the porous region.
  pub fn nodal_fields(&self, s: &MacroState) -> (Vec<[f64; 3]>, Vec<Option<[f64; 2]>>) {
    let grid = &self.problem.mesh.grid;
    let dim = self.dim();
    let nv = grid.vertices.len();
    let mut u = vec![[0.0; 3]; nv];
    let mut p = vec![None; nv];
    for v in 0..nv {
      if let Some(sl) = self.u_map.node_slots(grid, v, 0) {
        for i in 0..dim {
          u[v][i] = slot_value(sl[i], &s.u, &s.fixed[0]);
        }
      }
      if let (Some(a), Some(b)) = (self.pf_map.node_slots(grid, v, 0), self.pc_map.node_slots(grid, v, 0)) {
        p[v] = Some([slot_value(a[0], &s.pf, &s.fixed[1]), slot_value(b[0], &s.pc, &s.fixed[2])]);
      }
    }
    (u, p)
  }

  /// Runs the load program, calling `observe` after every converged step.
  pub fn time_loop(&self, probes: &[f64], mut observe: impl FnMut(&StepRecord, &MacroState)) -> Result<Vec<StepRecord>, MacroError> {
    let mut s = self.initial_state();
    let mut out = Vec::new();
    let dt = self.problem.loads.dt;
    for k in 1..=self.problem.loads.n_steps() {
      let (next, mut rec) = self.newton_step(&s, k as f64 * dt)?;
      rec.probes = probes.iter().filter_map(|&xp| self.probe(&next, xp)).collect();
      observe(&rec, &next);
      out.push(rec);
      s = next;
    }
    Ok(out)
  }
}

/// Jacobian of the `Q1` map at reference point `xi`.
fn element_jacobian(dim: usize, verts: &[[f64; 3]], xi: &[f64; 3]) -> (Mat, f64) {
  let nb = n_local(dim, 1);
  let mut vals = vec![0.0; nb];
  let mut g = vec![[0.0; 3]; nb];
  eval_basis(dim, 1, xi, &mut vals, &mut g);
  let mut j = Mat::zeros(dim);
  for a in 0..nb {
    for r in 0..dim {
      for c in 0..dim {
        j.m[r][c] += verts[a][r] * g[a][c];
      }
    }
  }
  let d = j.det();
  (j, d)
}

/// Macroscopic fields at a point of the porous region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointValues {
  pub u: [f64; 3],
  pub grad_u: Mat,
  pub p: [f64; 2],
  pub grad_pf: [f64; 3],
}

/// Open valves and the exchange balance of one assembly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValveSummary {
  pub admission: usize,
  pub ejection: usize,
  pub imbalance: f64,
  /// Open state per pressure node.
  pub signature: Vec<u8>,
}

fn push_elastic(t: &mut Triplets, dim: usize, c: &Tensor4, jxw: f64, grads: &[[f64; 3]], urow: &dyn Fn(usize, usize) -> Option<usize>) {
  let nb = grads.len();
  for a in 0..nb {
    for i in 0..dim {
      let Some(r) = urow(a, i) else { continue };
      for b in 0..nb {
        for k in 0..dim {
          let Some(col) = urow(b, k) else { continue };
          let mut v = 0.0;
          for j in 0..dim {
            for l in 0..dim {
              v += grads[a][j] * c.t[i][j][k][l] * grads[b][l];
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

#[allow(clippy::too_many_arguments)]
fn push_porous(
  t: &mut Triplets,
  dim: usize,
  tan: &TangentSet,
  dt: f64,
  jxw: f64,
  vals: &[f64],
  grads: &[[f64; 3]],
  urow: &dyn Fn(usize, usize) -> Option<usize>,
  prow: &dyn Fn(usize, usize) -> Option<usize>,
) {
  let nb = grads.len();
  push_elastic(t, dim, &tan.c, jxw, grads, urow);
  for a in 0..nb {
    for b in 0..nb {
      for q in 0..2 {
        let Some(col) = prow(q, b) else { continue };
        // Stress rows.
        for i in 0..dim {
          let Some(r) = urow(a, i) else { continue };
          let v: f64 = (0..dim).map(|j| tan.b[q].m[i][j] * grads[a][j]).sum();
          if v != 0.0 {
            t.push(r, col, -jxw * vals[b] * v);
          }
        }
        // Mass rows.
        for p in 0..2 {
          let Some(r) = prow(p, a) else { continue };
          let mut v = vals[a] * tan.m[p][q] * vals[b];
          if p == 0 {
            v += dt * (0..dim).map(|i| grads[a][i] * tan.q[q][i]).sum::<f64>() * vals[b];
            if q == 0 {
              for i in 0..dim {
                for j in 0..dim {
                  v += dt * grads[a][i] * tan.k.m[i][j] * grads[b][j];
                }
              }
            }
          }
          if v != 0.0 {
            t.push(r, col, jxw * v);
          }
        }
      }
      for k in 0..dim {
        for p in 0..2 {
          let Some(r) = prow(p, a) else { continue };
          let Some(col) = urow(b, k) else { continue };
          let mut v = vals[a] * (0..dim).map(|l| tan.d[p].m[k][l] * grads[b][l]).sum::<f64>();
          if p == 0 {
            for i in 0..dim {
              v += dt * grads[a][i] * (0..dim).map(|l| tan.g[i].m[k][l] * grads[b][l]).sum::<f64>();
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
