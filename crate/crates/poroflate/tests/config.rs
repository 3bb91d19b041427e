use std::path::PathBuf;

use proptest::prelude::*;

use poroflate::ScenarioConfig;
use poroflate_core::macro_solver::{Model, TimeFunction};

fn scenarios() -> Vec<PathBuf> {
  let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios");
  let mut paths: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "toml")).collect();
  paths.sort();
  paths
}

fn base() -> ScenarioConfig {
  ScenarioConfig::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/dns_validation.toml")).unwrap()
}

#[test]
fn shipped_scenarios_load_and_round_trip() {
  let paths = scenarios();
  assert!(paths.len() >= 6);
  for p in paths {
    let cfg = ScenarioConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    assert_eq!(ScenarioConfig::from_toml(&cfg.to_toml()).unwrap(), cfg, "{}", p.display());
  }
}

#[test]
fn invalid_settings_are_rejected() {
  let mut c = base();
  c.loads.dt = -0.01;
  assert!(ScenarioConfig::from_toml(&c.to_toml()).is_err());
  let mut c = base();
  c.valves.kappa_a = -1.0;
  assert!(ScenarioConfig::from_toml(&c.to_toml()).is_err());
  let mut c = base();
  c.probes.push(1.5);
  assert!(ScenarioConfig::from_toml(&c.to_toml()).is_err());
  let mut c = base();
  c.cell.dim = 1;
  assert!(ScenarioConfig::from_toml(&c.to_toml()).is_err());
  assert!(ScenarioConfig::from_toml(&format!("unknown_key = 1\n{}", base().to_toml())).is_err());
}

proptest! {
  #![proptest_config(ProptestConfig::with_cases(64))]

  #[test]
  fn serialized_scenario_parses_back_unchanged(
    dt in 1e-4f64..0.1,
    steps in 1usize..200,
    kappa_a in 0.0f64..1e-5,
    kappa_e in 0.0f64..1e-5,
    delta_p in 0.0f64..1e7,
    amplitude in -1e7f64..1e7,
    omega in 0.0f64..20.0,
    eps0 in 1e-4f64..0.1,
    probes in proptest::collection::vec(0.0f64..=1.0, 0..5),
    e_model in any::<bool>(),
  ) {
    let mut c = base();
    c.loads.dt = dt;
    c.loads.t_end = dt * steps as f64;
    c.valves.kappa_a = kappa_a;
    c.valves.kappa_e = kappa_e;
    c.valves.delta_p = delta_p;
    c.loads.traction[0].value = TimeFunction::Sine { amplitude, omega };
    c.materials.eps0 = eps0;
    c.probes = probes;
    c.model = if e_model { Model::E } else { Model::L };
    c.reconstruct = None;
    c.validate().unwrap();
    prop_assert_eq!(ScenarioConfig::from_toml(&c.to_toml()).unwrap(), c);
  }
}
