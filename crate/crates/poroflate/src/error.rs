use std::process::ExitCode;

use poroflate_core::macro_solver::MacroError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
  #[error("configuration error: {0}")]
  Config(String),
  #[error("{stage}: Newton iteration failed: {message}")]
  Newton { stage: &'static str, message: String },
  #[error("{stage}: {message}")]
  Numerical { stage: &'static str, message: String },
  #[error("i/o error on {path}: {message}")]
  Io { path: String, message: String },
}

impl Error {
  pub fn exit_code(&self) -> ExitCode {
    ExitCode::from(match self {
      Error::Config(_) => 2,
      Error::Newton { .. } => 3,
      Error::Numerical { .. } => 4,
      Error::Io { .. } => 5,
    })
  }

  pub fn numerical(stage: &'static str, e: impl std::fmt::Display) -> Self {
    Error::Numerical { stage, message: e.to_string() }
  }

  pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
    Error::Io { path: path.display().to_string(), message: e.to_string() }
  }

  pub fn from_macro(stage: &'static str, e: MacroError) -> Self {
    match e {
      MacroError::InvalidConfig(m) => Error::Config(m),
      MacroError::MissingSensitivities => Error::Config("the deformation-dependent model needs sensitivities".into()),
      e @ (MacroError::NewtonDiverged { .. } | MacroError::NonFiniteResidual { .. }) => Error::Newton { stage, message: e.to_string() },
      e => Error::numerical(stage, e),
    }
  }
}
