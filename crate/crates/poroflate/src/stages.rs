//! The pipeline stages behind the CLI verbs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use poroflate_core::dns::{DnsState, DnsSystem};
use poroflate_core::fem::Permeability;
use poroflate_core::homogenize::{compute_coefficients, permeability_sweep, DualRoutes, HomogenizedCoefficients};
use poroflate_core::macro_solver::{
  Boundary, DisplacementBc, LoadProgram, MacroProblem, MacroState, MacroSystem, Model, PressureBc, StepRecord, TimeFunction, TractionBc,
};
use poroflate_core::materials::Materials;
use poroflate_core::mesh::{build_cell_mesh, build_macro_mesh, CellGeometrySpec, CellMesh, MacroGeometrySpec};
use poroflate_core::micro_cell::{solve_correctors, CorrectorSet, Pore};
use poroflate_core::reconstruct::{macro_point, reconstruct_fields, CellFields};
use poroflate_core::sensitivity::{build_mode_sensitivities, CoefficientSensitivities};
use poroflate_core::tensor::Mat;

use crate::config::ScenarioConfig;
use crate::error::Error;
use crate::output::{ensure_dir, read_json, write_json, write_vtk, Csv, Field};

pub const COEFFICIENTS_FILE: &str = "coefficients.json";
pub const SENSITIVITIES_FILE: &str = "sensitivities.json";
pub const CORRECTORS_FILE: &str = "correctors.json";

/// Cell-level results of the precompute stage.
pub struct CellData {
  pub mesh: CellMesh,
  pub correctors: CorrectorSet,
  pub coefficients: HomogenizedCoefficients,
  pub routes: DualRoutes,
  pub sensitivities: Option<CoefficientSensitivities>,
}

/// Contents of the coefficient file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientFile {
  pub cell: CellGeometrySpec,
  pub materials: Materials,
  pub coefficients: HomogenizedCoefficients,
  /// Largest relative disagreement of the dual routes for B, M and K.
  pub dual_route_discrepancy: [f64; 3],
  pub routes: DualRoutes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityFile {
  pub cell: CellGeometrySpec,
  pub materials: Materials,
  pub sensitivities: CoefficientSensitivities,
}

/// Raw corrector vectors on their degree-of-freedom maps.
#[derive(Serialize)]
struct CorrectorFile<'a> {
  strain: &'a [Vec<f64>],
  pressure: &'a [Vec<f64>; 2],
  velocity: &'a [Vec<f64>],
  pressure_flow: &'a [Vec<f64>],
}

pub fn cell_data(spec: &CellGeometrySpec, mats: &Materials, with_sensitivities: bool) -> Result<CellData, Error> {
  let mesh = build_cell_mesh(spec).map_err(|e| Error::Config(e.to_string()))?;
  let correctors = solve_correctors(&mesh, mats).map_err(|e| Error::numerical("correctors", e))?;
  let (coefficients, routes) = compute_coefficients(&mesh, &correctors, mats).map_err(|e| Error::numerical("coefficients", e))?;
  let sensitivities = if with_sensitivities {
    Some(build_mode_sensitivities(&mesh, mats, &correctors).map_err(|e| Error::numerical("sensitivities", e))?)
  } else {
    None
  };
  Ok(CellData { mesh, correctors, coefficients, routes, sensitivities })
}

/// Solves the cell problems and writes coefficients, correctors and, for the
/// deformation-dependent model, sensitivities.
pub fn precompute(cfg: &ScenarioConfig, model: Model, dir: &Path) -> Result<(CellData, Vec<PathBuf>), Error> {
  let started = Instant::now();
  let data = cell_data(&cfg.cell, &cfg.materials, model == Model::E)?;
  info!("cell problems solved in {:.1} s", started.elapsed().as_secs_f64());
  ensure_dir(dir)?;
  let (db, dm, dk) = data.routes.discrepancy();
  let file = CoefficientFile {
    cell: cfg.cell.clone(),
    materials: cfg.materials.clone(),
    coefficients: data.coefficients.clone(),
    dual_route_discrepancy: [db, dm, dk],
    routes: data.routes.clone(),
  };
  let mut written = vec![write_json(&dir.join(COEFFICIENTS_FILE), &file)?];
  let c = &data.correctors;
  let raw = CorrectorFile { strain: &c.strain, pressure: &c.pressure, velocity: &c.stokes.psi, pressure_flow: &c.stokes.pi };
  written.push(write_json(&dir.join(CORRECTORS_FILE), &raw)?);
  if let Some(s) = &data.sensitivities {
    let f = SensitivityFile { cell: cfg.cell.clone(), materials: cfg.materials.clone(), sensitivities: s.clone() };
    written.push(write_json(&dir.join(SENSITIVITIES_FILE), &f)?);
  }
  Ok((data, written))
}

/// Coefficients (and sensitivities when needed) from `dir` when they match the
/// scenario, otherwise from a fresh precompute.
pub fn load_or_precompute(cfg: &ScenarioConfig, model: Model, dir: &Path) -> Result<(HomogenizedCoefficients, Option<CoefficientSensitivities>), Error> {
  let cpath = dir.join(COEFFICIENTS_FILE);
  let spath = dir.join(SENSITIVITIES_FILE);
  if cpath.exists() {
    let c: CoefficientFile = read_json(&cpath)?;
    if c.cell == cfg.cell && c.materials == cfg.materials {
      if model == Model::L {
        return Ok((c.coefficients, None));
      }
      if spath.exists() {
        let s: SensitivityFile = read_json(&spath)?;
        if s.cell == cfg.cell && s.materials == cfg.materials {
          return Ok((c.coefficients, Some(s.sensitivities)));
        }
      }
    }
    info!("stored coefficients do not match the scenario; recomputing");
  }
  let (data, _) = precompute(cfg, model, dir)?;
  Ok((data.coefficients, data.sensitivities))
}

/// Macroscopic system for the scenario, with cell coefficients restricted to
/// the macroscopic dimension.
pub fn macro_system(
  cfg: &ScenarioConfig,
  model: Model,
  coefficients: &HomogenizedCoefficients,
  sensitivities: Option<&CoefficientSensitivities>,
) -> Result<MacroSystem, Error> {
  let dim = cfg.macro_geometry.dim;
  let mesh = build_macro_mesh(&cfg.macro_geometry).map_err(|e| Error::Config(e.to_string()))?;
  let problem = MacroProblem {
    mesh,
    porous: coefficients.restrict(dim),
    sensitivities: if model == Model::E { sensitivities.map(|s| s.restrict(dim)) } else { None },
    substrate: cfg.materials.substrate.tensor(dim),
    valves: cfg.valves,
    model,
    loads: cfg.loads.clone(),
    newton: cfg.newton,
  };
  MacroSystem::new(problem).map_err(|e| Error::from_macro("macro setup", e))
}

/// Summary of a macroscopic run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
  pub name: String,
  pub model: Model,
  pub steps: usize,
  pub median_iterations: f64,
  pub max_iterations: usize,
  pub damped_steps: usize,
  pub max_exchange_imbalance: f64,
  pub wall_seconds: f64,
  pub status: String,
}

fn median(mut v: Vec<f64>) -> f64 {
  if v.is_empty() {
    return 0.0;
  }
  v.sort_by(|a, b| a.total_cmp(b));
  let n = v.len();
  if n % 2 == 1 {
    v[n / 2]
  } else {
    0.5 * (v[n / 2 - 1] + v[n / 2])
  }
}

pub fn summarize(name: &str, model: Model, steps: &[StepRecord], wall: f64) -> RunSummary {
  RunSummary {
    name: name.into(),
    model,
    steps: steps.len(),
    median_iterations: median(steps.iter().map(|r| r.iterations as f64).collect()),
    max_iterations: steps.iter().map(|r| r.iterations).max().unwrap_or(0),
    damped_steps: steps.iter().filter(|r| r.damped).count(),
    max_exchange_imbalance: steps.iter().map(|r| r.exchange_imbalance).fold(0.0, f64::max),
    wall_seconds: wall,
    status: "completed".into(),
  }
}

fn probe_csv() -> Csv {
  Csv::new("probes", &["t", "xp", "pf", "pc", "u1", "u2", "u3", "w_a", "w_e"])
}

fn step_csv() -> Csv {
  Csv::new("steps", &["t", "iterations", "increment", "residual", "damped", "exchange_imbalance", "open_admission", "open_ejection"])
}

fn push_step(steps: &mut Csv, probes: &mut Csv, r: &StepRecord) {
  steps.numbers(&[
    r.t,
    r.iterations as f64,
    r.increment,
    r.residual,
    if r.damped { 1.0 } else { 0.0 },
    r.exchange_imbalance,
    r.open_admission as f64,
    r.open_ejection as f64,
  ]);
  for p in &r.probes {
    probes.numbers(&[r.t, p.xp, p.pf, p.pc, p.u[0], p.u[1], p.u[2], p.w_a, p.w_e]);
  }
}

pub fn write_macro_fields(sys: &MacroSystem, s: &MacroState, path: &Path, title: &str) -> Result<PathBuf, Error> {
  let (u, p) = sys.nodal_fields(s);
  let pf = p.iter().map(|v| v.map_or(0.0, |v| v[0])).collect();
  let pc = p.iter().map(|v| v.map_or(0.0, |v| v[1])).collect();
  let porous = p.iter().map(|v| if v.is_some() { 1.0 } else { 0.0 }).collect();
  let region = sys.problem.mesh.regions.iter().map(|r| if *r == poroflate_core::mesh::Region::Porous { 1.0 } else { 0.0 }).collect();
  write_vtk(
    path,
    title,
    &sys.problem.mesh.grid,
    &[Field::Vector("u", u), Field::Scalar("pf", pf), Field::Scalar("pc", pc), Field::Scalar("porous_node", porous)],
    &[Field::Scalar("porous", region)],
  )
}

/// Runs the macroscopic model and writes probe and step tables, field dumps
/// and the run summary.
pub fn run(cfg: &ScenarioConfig, model: Model, dir: &Path) -> Result<(RunSummary, Vec<PathBuf>), Error> {
  ensure_dir(dir)?;
  let (h, s) = load_or_precompute(cfg, model, dir)?;
  let sys = macro_system(cfg, model, &h, s.as_ref())?;
  let started = Instant::now();
  let (mut steps_csv, mut probes_csv) = (step_csv(), probe_csv());
  let n = cfg.loads.n_steps();
  let mut written = Vec::new();
  let mut io_error = None;
  let mut done = Vec::new();
  let result = sys.time_loop(&cfg.probes, |r, st| {
    push_step(&mut steps_csv, &mut probes_csv, r);
    done.push(r.clone());
    let k = (r.t / cfg.loads.dt).round() as usize;
    if k == n || (cfg.vtk_every > 0 && k % cfg.vtk_every == 0) {
      let path = dir.join(format!("fields_{k:05}.vtk"));
      match write_macro_fields(&sys, st, &path, &format!("{} t={}", cfg.name, r.t)) {
        Ok(p) => written.push(p),
        Err(e) => io_error = io_error.take().or(Some(e)),
      }
    }
  });
  written.push(steps_csv.write(&dir.join("steps.csv"))?);
  written.push(probes_csv.write(&dir.join("probes.csv"))?);
  if let Some(e) = io_error {
    return Err(e);
  }
  let wall = started.elapsed().as_secs_f64();
  match result {
    Ok(steps) => {
      let summary = summarize(&cfg.name, model, &steps, wall);
      written.push(write_json(&dir.join("summary.json"), &summary)?);
      Ok((summary, written))
    }
    Err(e) => {
      let err = Error::from_macro("macro run", e);
      let mut summary = summarize(&cfg.name, model, &done, wall);
      summary.status = err.to_string();
      write_json(&dir.join("summary.json"), &summary)?;
      Err(err)
    }
  }
}

/// Permeability over the configured membrane permeabilities.
pub fn sweep_permeability(cfg: &ScenarioConfig) -> Result<Vec<(Permeability, Mat)>, Error> {
  if cfg.sweep.is_none() {
    return Err(Error::Config("scenario has no [sweep] section".into()));
  }
  let mesh = build_cell_mesh(&cfg.cell).map_err(|e| Error::Config(e.to_string()))?;
  let mu_bar = cfg.materials.mu_bar();
  let grid = cfg.sweep_grid();
  let rows: Result<Vec<_>, _> = grid.par_iter().map(|k| permeability_sweep(&mesh, mu_bar, &[*k]).map(|mut v| v.remove(0))).collect();
  rows.map_err(|e| Error::numerical("permeability sweep", e))
}

pub fn write_sweep(rows: &[(Permeability, Mat)], dim: usize, path: &Path) -> Result<PathBuf, Error> {
  let mut header = vec!["kappa".to_string()];
  for i in 0..dim {
    for j in 0..dim {
      header.push(format!("K{}{}", i + 1, j + 1));
    }
  }
  let refs: Vec<&str> = header.iter().map(String::as_str).collect();
  let mut csv = Csv::new("permeability_sweep", &refs);
  for (k, m) in rows {
    let mut v = vec![match k {
      Permeability::Finite(x) => *x,
      Permeability::Infinite => f64::INFINITY,
    }];
    for i in 0..dim {
      for j in 0..dim {
        v.push(m.m[i][j]);
      }
    }
    csv.numbers(&v);
  }
  csv.write(path)
}

/// One compared quantity at one sample point and time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
  pub t: f64,
  pub xp: f64,
  pub field: String,
  pub dns: f64,
  pub homogenized: f64,
  pub relative_difference: f64,
  /// Points in the first or last cell are reported but not judged.
  pub exempt: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonReport {
  pub rows: Vec<ComparisonRow>,
  pub tolerance: f64,
  pub worst_judged: f64,
  pub pass: bool,
  pub dns_unknowns: usize,
  pub dns_seconds: f64,
  pub homogenized_seconds: f64,
  /// DNS wall time over homogenized wall time, cell problems included.
  pub speedup: f64,
}

fn relative(a: f64, b: f64) -> f64 {
  let s = a.abs().max(b.abs());
  if s == 0.0 {
    0.0
  } else {
    (a - b).abs() / s.max(a.abs())
  }
}

/// Runs the direct simulation and the homogenized pipeline on the same
/// sample and compares displacement, channel and inclusion pressure at the
/// centres of the cells containing the configured samples.
pub fn compare_dns(cfg: &ScenarioConfig) -> Result<ComparisonReport, Error> {
  let d = cfg.dns.as_ref().ok_or_else(|| Error::Config("scenario has no [dns] section".into()))?;
  let dim = cfg.cell.dim;
  if cfg.cell.resolution % 4 != 0 {
    return Err(Error::Config("the comparison needs a cell resolution divisible by 4".into()));
  }
  let mats = Materials { eps0: d.eps0, ..cfg.materials.clone() }.equalized();
  let n = d.n_cells;
  let length = n as f64 * d.eps0;
  let load = d.load.clone();
  let times: Vec<f64> = {
    let steps = (d.t_end / d.dt).round() as usize;
    let every = (steps / 10).max(1);
    (1..=steps).filter(|k| k % every == 0 || *k == steps).map(|k| k as f64 * d.dt).collect()
  };
  let cells: Vec<usize> = d.samples.iter().map(|xp| ((xp * n as f64) as usize).min(n - 1)).collect();
  let res = cfg.cell.resolution;
  let channel_y = [res / 2, 0, 0];
  let solid_y = [res / 2, res / 4, if dim == 3 { res / 4 } else { 0 }];
  let centre = |k: usize| (k as f64 + 0.5) * d.eps0;

  let homogenized = || -> Result<(Vec<Vec<[f64; 3]>>, f64), Error> {
    let started = Instant::now();
    let cell = cell_data(&cfg.cell, &mats, false)?;
    let spec = MacroGeometrySpec {
      dim,
      length,
      thickness: d.eps0,
      porous_height: d.eps0,
      resolution: 1,
      elements_along: Some(n * d.macro_elements_per_cell),
    };
    let traction = TractionBc { boundary: Boundary::Right, direction: [-1.0, 0.0, 0.0], value: load.clone() };
    let loads = LoadProgram {
      dt: d.dt,
      t_end: d.t_end,
      displacement: vec![
        DisplacementBc { boundary: Boundary::Left, components: (0..dim).collect() },
        DisplacementBc { boundary: Boundary::Side, components: (1..dim).collect() },
      ],
      pressure: vec![
        PressureBc { boundary: Boundary::Left, pore: Pore::Channel, value: TimeFunction::Constant { value: 0.0 } },
        PressureBc { boundary: Boundary::Right, pore: Pore::Channel, value: load.clone() },
      ],
      traction: vec![traction],
    };
    let problem = MacroProblem {
      mesh: build_macro_mesh(&spec).map_err(|e| Error::Config(e.to_string()))?,
      porous: cell.coefficients.clone(),
      sensitivities: None,
      substrate: mats.substrate.tensor(dim),
      valves: cfg.valves,
      model: Model::L,
      loads,
      newton: cfg.newton,
    };
    let sys = MacroSystem::new(problem).map_err(|e| Error::from_macro("homogenized comparison", e))?;
    let mut out = Vec::new();
    let mut failure = None;
    sys
      .time_loop(&[], |r, s| {
        if !times.iter().any(|t| (t - r.t).abs() < 0.5 * d.dt) || failure.is_some() {
          return;
        }
        let mut row = Vec::new();
        for &k in &cells {
          let mut x = [centre(k), 0.5 * d.eps0, 0.0];
          if dim == 3 {
            x[2] = 0.5 * d.eps0;
          }
          let f = macro_point(&sys, s, x, [0.0; 3]).and_then(|at| reconstruct_fields(&cell.mesh, &cell.correctors, &at, d.eps0));
          match f {
            Ok(f) => row.push(sample_fields(&cell.mesh, &f, solid_y, channel_y)),
            Err(e) => failure = Some(Error::numerical("reconstruction", e)),
          }
        }
        out.push(row);
      })
      .map_err(|e| Error::from_macro("homogenized comparison", e))?;
    if let Some(e) = failure {
      return Err(e);
    }
    Ok((out, started.elapsed().as_secs_f64()))
  };

  let direct = || -> Result<(Vec<Vec<[f64; 3]>>, f64, usize), Error> {
    let started = Instant::now();
    let mesh = build_cell_mesh(&cfg.cell).map_err(|e| Error::Config(e.to_string()))?;
    let sys = DnsSystem::build(&mesh, n, d.eps0, &mats, cfg.valves, d.dt).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    let h = d.eps0 / res as f64;
    let at = |k: usize, y: [usize; 3]| {
      let mut x = [k as f64 * d.eps0 + y[0] as f64 * h, y[1] as f64 * h, 0.0];
      if dim == 3 {
        x[2] = y[2] as f64 * h;
      }
      x
    };
    let mut record = |t: f64, s: &DnsState| {
      if !times.iter().any(|tt| (tt - t).abs() < 0.5 * d.dt) {
        return;
      }
      let pc = sys.inclusion_pressures(s);
      let row = cells
        .iter()
        .map(|&k| {
          let u = sys.sample(s, &at(k, solid_y)).map_or(f64::NAN, |p| p.u[0]);
          let pf = sys.sample(s, &at(k, channel_y)).and_then(|p| p.pf).unwrap_or(f64::NAN);
          [u, pf, pc.get(k).copied().unwrap_or(0.0)]
        })
        .collect();
      out.push(row);
    };
    sys
      .time_loop(&load, d.t_end, &cfg.newton, |r, s| record(r.t, s))
      .map_err(|e| Error::Newton { stage: "direct simulation", message: e.to_string() })?;
    Ok((out, started.elapsed().as_secs_f64(), sys.n_unknowns()))
  };

  let (hom, dns) = rayon::join(homogenized, direct);
  let (hom, hom_seconds) = hom?;
  let (dns, dns_seconds, dns_unknowns) = dns?;
  let mut rows = Vec::new();
  for (ti, t) in times.iter().enumerate() {
    for (si, &k) in cells.iter().enumerate() {
      for (fi, field) in ["u1", "pf", "pc"].iter().enumerate() {
        let (a, b) = (dns[ti][si][fi], hom[ti][si][fi]);
        rows.push(ComparisonRow {
          t: *t,
          xp: centre(k) / length,
          field: field.to_string(),
          dns: a,
          homogenized: b,
          relative_difference: if a.is_nan() { f64::INFINITY } else { relative(a, b) },
          exempt: k == 0 || k == n - 1,
        });
      }
    }
  }
  let last = *times.last().unwrap();
  let worst = rows.iter().filter(|r| !r.exempt && r.t == last).map(|r| r.relative_difference).fold(0.0, f64::max);
  let judged = rows.iter().any(|r| !r.exempt && r.t == last);
  Ok(ComparisonReport {
    rows,
    tolerance: d.tolerance,
    worst_judged: worst,
    pass: judged && worst <= d.tolerance,
    dns_unknowns,
    dns_seconds,
    homogenized_seconds: hom_seconds,
    speedup: dns_seconds / hom_seconds.max(f64::MIN_POSITIVE),
  })
}

/// `[u1 at the solid point, p_f at the channel point, p_c]`.
fn sample_fields(mesh: &CellMesh, f: &CellFields, solid: [usize; 3], channel: [usize; 3]) -> [f64; 3] {
  let v = |c: [usize; 3]| mesh.grid.lattice_index(1, c);
  let u = f.u[v(solid)].map_or(f64::NAN, |u| u[0]);
  let pf = f.pf[v(channel)].unwrap_or(f64::NAN);
  let pc = f.pc.iter().flatten().next().copied().unwrap_or(0.0);
  [u, pf, pc]
}

pub fn write_comparison(report: &ComparisonReport, dir: &Path) -> Result<Vec<PathBuf>, Error> {
  ensure_dir(dir)?;
  let mut csv = Csv::new("dns_comparison", &["t", "xp", "field", "dns", "homogenized", "relative_difference", "exempt"]);
  for r in &report.rows {
    csv.row(&[
      r.t.to_string(),
      r.xp.to_string(),
      r.field.clone(),
      r.dns.to_string(),
      r.homogenized.to_string(),
      r.relative_difference.to_string(),
      (r.exempt as u8).to_string(),
    ]);
  }
  Ok(vec![csv.write(&dir.join("dns_comparison.csv"))?, write_json(&dir.join("dns_comparison.json"), report)?])
}

/// Macroscopic run up to the configured time, then the cell expansion at the
/// configured position.
pub fn reconstruct(cfg: &ScenarioConfig, model: Model, dir: &Path) -> Result<(CellFields, Vec<PathBuf>), Error> {
  let req = cfg.reconstruct.as_ref().ok_or_else(|| Error::Config("scenario has no [reconstruct] section".into()))?;
  if cfg.cell.dim < cfg.macro_geometry.dim {
    return Err(Error::Config("reconstruction needs a cell of at least the macroscopic dimension".into()));
  }
  ensure_dir(dir)?;
  let cell = cell_data(&cfg.cell, &cfg.materials, model == Model::E)?;
  let target = (req.t / cfg.loads.dt).round() as usize;
  let mut short = cfg.clone();
  short.loads.t_end = target.max(1) as f64 * cfg.loads.dt;
  let sys = macro_system(&short, model, &cell.coefficients, cell.sensitivities.as_ref())?;
  let mut state = (target == 0).then(|| sys.initial_state());
  if target > 0 {
    sys
      .time_loop(&[], |r, s| {
        if (r.t / cfg.loads.dt).round() as usize == target {
          state = Some(s.clone());
        }
      })
      .map_err(|e| Error::from_macro("macro run", e))?;
  }
  let state = state.expect("target step reached");
  let x = sys.problem.mesh.probe_point(req.position);
  let at = macro_point(&sys, &state, x, req.force).map_err(|e| Error::Config(e.to_string()))?.lift(cfg.cell.dim);
  let fields = reconstruct_fields(&cell.mesh, &cell.correctors, &at, cfg.materials.eps0).map_err(|e| Error::numerical("reconstruction", e))?;
  let stem = format!("cell_x{:.4}_t{:.4}", req.position, state.t);
  let grid = &cell.mesh.grid;
  let defined = |v: &[Option<f64>]| v.iter().map(|x| x.unwrap_or(0.0)).collect::<Vec<_>>();
  let tag = cell
    .mesh
    .tags
    .iter()
    .map(|t| match t {
      poroflate_core::mesh::Subdomain::SolidSoft => 0.0,
      poroflate_core::mesh::Subdomain::SolidStiff => 1.0,
      poroflate_core::mesh::Subdomain::FluidChannel(_) => 2.0,
      poroflate_core::mesh::Subdomain::FluidInclusion => 3.0,
    })
    .collect();
  let vtk = write_vtk(
    &dir.join(format!("{stem}.vtk")),
    &format!("{} reconstruction at x={:?} t={}", cfg.name, at.x, state.t),
    grid,
    &[
      Field::Vector("u", fields.u.iter().map(|v| v.unwrap_or([0.0; 3])).collect()),
      Field::Scalar("pf", defined(&fields.pf)),
      Field::Scalar("pc", defined(&fields.pc)),
      Field::Vector("w", fields.w.iter().map(|v| v.unwrap_or([0.0; 3])).collect()),
      Field::Vector("position", fields.positions.clone()),
    ],
    &[Field::Scalar("subdomain", tag)],
  )?;
  let json = write_json(&dir.join(format!("{stem}.json")), &at)?;
  Ok((fields, vec![vtk, json]))
}
