//! Material parameters of the porous structure and the substrate.

use serde::{Deserialize, Serialize};

use crate::fem::Permeability;
use crate::mesh::Subdomain;
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Isotropic {
  pub young: f64,
  pub poisson: f64,
}

impl Isotropic {
  pub fn tensor(&self, dim: usize) -> Tensor4 {
    Tensor4::from_young_poisson(dim, self.young, self.poisson)
  }

  pub fn is_valid(&self) -> bool {
    self.young > 0.0 && self.poisson > -1.0 && self.poisson < 0.5
  }
}

/// Which porosity multiplies `γ` in the diagonal of the Biot modulus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompressibilityIndex {
  /// `φ_P γ δ_PQ`.
  #[default]
  PerPore,
  /// `φ_f γ δ_PQ`.
  ChannelOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Materials {
  /// Matrix around the inclusions.
  pub soft: Isotropic,
  /// Shell around the channel.
  pub stiff: Isotropic,
  /// Non-porous substrate of the bi-layer.
  pub substrate: Isotropic,
  /// Fluid compressibility [1/Pa].
  pub gamma: f64,
  /// Physical fluid viscosity [Pa s].
  pub viscosity: f64,
  /// Cell size `ε₀` used to rescale the viscosity.
  pub eps0: f64,
  pub membrane: Permeability,
  #[serde(default)]
  pub compressibility_index: CompressibilityIndex,
}

impl Default for Materials {
  /// Water in a soft matrix with a stiff channel shell on a stiff substrate.
  fn default() -> Self {
    Self {
      soft: Isotropic { young: 20e6, poisson: 0.49 },
      stiff: Isotropic { young: 200e6, poisson: 0.3 },
      substrate: Isotropic { young: 2e9, poisson: 0.4 },
      gamma: 1.0 / 2.15e9,
      viscosity: 8.9e-4,
      eps0: 0.0025,
      membrane: Permeability::Infinite,
      compressibility_index: CompressibilityIndex::PerPore,
    }
  }
}

impl Materials {
  /// Rescaled viscosity `μ̄ = μ / ε₀²` of the cell Stokes problems.
  pub fn mu_bar(&self) -> f64 {
    self.viscosity / (self.eps0 * self.eps0)
  }

  /// Elasticity of a solid subdomain; zero for fluid.
  pub fn solid_tensor(&self, dim: usize, tag: Subdomain) -> Tensor4 {
    match tag {
      Subdomain::SolidSoft => self.soft.tensor(dim),
      Subdomain::SolidStiff => self.stiff.tensor(dim),
      _ => Tensor4::zeros(dim),
    }
  }

  /// Same solid everywhere, as in the direct simulation.
  pub fn equalized(&self) -> Self {
    Self { stiff: self.soft, ..self.clone() }
  }

  pub fn validate(&self) -> Result<(), &'static str> {
    if !(self.soft.is_valid() && self.stiff.is_valid() && self.substrate.is_valid()) {
      return Err("elastic moduli must satisfy E > 0, -1 < nu < 1/2");
    }
    if !(self.gamma >= 0.0 && self.viscosity > 0.0 && self.eps0 > 0.0) {
      return Err("fluid parameters must be positive");
    }
    if let Permeability::Finite(k) = self.membrane {
      if !(k >= 0.0) {
        return Err("membrane permeability must be nonnegative");
      }
    }
    Ok(())
  }
}
