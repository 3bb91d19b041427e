//! Scenario files: one TOML document per run, all quantities in SI units.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use poroflate_core::fem::Permeability;
use poroflate_core::macro_solver::{LoadProgram, Model, NewtonSettings, TimeFunction, ValveParams};
use poroflate_core::materials::Materials;
use poroflate_core::mesh::{CellGeometrySpec, MacroGeometrySpec};

use crate::error::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
  pub name: String,
  /// Output directory; relative paths resolve against the working directory.
  #[serde(default = "default_output")]
  pub output: PathBuf,
  #[serde(default)]
  pub model: Model,
  pub cell: CellGeometrySpec,
  #[serde(rename = "macro")]
  pub macro_geometry: MacroGeometrySpec,
  pub materials: Materials,
  pub valves: ValveParams,
  pub loads: LoadProgram,
  #[serde(default)]
  pub newton: NewtonSettings,
  /// Probe positions as fractions of the sample length.
  #[serde(default)]
  pub probes: Vec<f64>,
  /// Write a field dump every this many steps; the last step is always written.
  #[serde(default)]
  pub vtk_every: usize,
  #[serde(default, skip_serializing_if = "Option::is_none")]
  pub sweep: Option<SweepConfig>,
  #[serde(default, skip_serializing_if = "Option::is_none")]
  pub dns: Option<DnsConfig>,
  #[serde(default, skip_serializing_if = "Option::is_none")]
  pub reconstruct: Option<ReconstructConfig>,
}

fn default_output() -> PathBuf {
  PathBuf::from("out")
}

/// Membrane permeability sweep on the configured cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
  pub kappa_min: f64,
  pub kappa_max: f64,
  pub points: usize,
  /// Append the intact channel as the last point.
  #[serde(default = "yes")]
  pub include_intact: bool,
}

fn yes() -> bool {
  true
}

/// Direct simulation on a row of cells loaded at its free end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnsConfig {
  pub n_cells: usize,
  pub eps0: f64,
  pub dt: f64,
  pub t_end: f64,
  /// Reservoir pressure on the loaded end.
  pub load: TimeFunction,
  /// Comparison points as fractions of the sample length.
  pub samples: Vec<f64>,
  /// Relative tolerance of the comparison.
  #[serde(default = "five_percent")]
  pub tolerance: f64,
  /// Macroscopic elements per cell along the sample.
  #[serde(default = "eight")]
  pub macro_elements_per_cell: usize,
}

fn five_percent() -> f64 {
  0.05
}

fn eight() -> usize {
  8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructConfig {
  /// Fraction of the sample length.
  pub position: f64,
  /// Time of the macroscopic state to expand.
  pub t: f64,
  /// Volume force driving the channel flow.
  #[serde(default)]
  pub force: [f64; 3],
}

impl ScenarioConfig {
  pub fn from_toml(text: &str) -> Result<Self, Error> {
    let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
  }

  pub fn to_toml(&self) -> String {
    toml::to_string_pretty(self).expect("scenario serializes")
  }

  pub fn load(path: &Path) -> Result<Self, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Self::from_toml(&text)
  }

  pub fn validate(&self) -> Result<(), Error> {
    let bad = |m: String| Err(Error::Config(m));
    if self.cell.dim < self.macro_geometry.dim {
      return bad(format!("cell dimension {} below macroscopic dimension {}", self.cell.dim, self.macro_geometry.dim));
    }
    self.materials.validate().map_err(|e| Error::Config(e.into()))?;
    self.valves.validate().map_err(|e| Error::Config(e.to_string()))?;
    self.loads.validate(self.macro_geometry.dim).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(p) = self.probes.iter().find(|p| !(0.0..=1.0).contains(*p)) {
      return bad(format!("probe position {p} outside [0, 1]"));
    }
    if !(self.newton.tol > 0.0 && self.newton.max_iter > 0 && self.newton.u_ref > 0.0 && self.newton.p_ref > 0.0) {
      return bad("newton settings must be positive".into());
    }
    if let Some(s) = &self.sweep {
      if !(s.kappa_min >= 0.0 && s.kappa_max >= s.kappa_min && s.points > 0) {
        return bad("sweep needs 0 <= kappa_min <= kappa_max and at least one point".into());
      }
    }
    if let Some(d) = &self.dns {
      if d.n_cells < 2 || !(d.eps0 > 0.0 && d.dt > 0.0 && d.t_end >= d.dt && d.tolerance > 0.0) || d.macro_elements_per_cell == 0 {
        return bad("dns needs n_cells >= 2, positive eps0, dt, tolerance and t_end >= dt".into());
      }
      if d.samples.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return bad("dns samples must lie in [0, 1]".into());
      }
    }
    if let Some(r) = &self.reconstruct {
      if !(0.0..=1.0).contains(&r.position) || !(0.0..=self.loads.t_end).contains(&r.t) {
        return bad("reconstruct position must lie in [0, 1] and t within the run".into());
      }
    }
    Ok(())
  }

  /// Membrane permeabilities of the sweep, ascending.
  pub fn sweep_grid(&self) -> Vec<Permeability> {
    let Some(s) = &self.sweep else { return Vec::new() };
    let mut g = poroflate_core::homogenize::linear_grid(s.kappa_min, s.kappa_max, s.points);
    if s.include_intact {
      g.push(Permeability::Infinite);
    }
    g
  }
}
