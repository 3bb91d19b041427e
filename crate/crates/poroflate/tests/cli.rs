use std::path::{Path, PathBuf};
use std::process::Command;

use poroflate::ScenarioConfig;
use poroflate_core::macro_solver::{Model, TimeFunction};

fn scenario(name: &str) -> ScenarioConfig {
  ScenarioConfig::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml"))).unwrap()
}

/// Writes `cfg` into `dir` and runs `verb` on it; returns the exit code.
fn poroflate(verb: &str, cfg: &ScenarioConfig, dir: &Path, out: &Path) -> i32 {
  let path = dir.join(format!("{}.toml", cfg.name));
  std::fs::write(&path, cfg.to_toml()).unwrap();
  let status = Command::new(env!("CARGO_BIN_EXE_poroflate"))
    .args([verb, "--config"])
    .arg(&path)
    .arg("--out")
    .arg(out)
    .env("RUST_LOG", "warn")
    .status()
    .unwrap();
  status.code().expect("exited normally")
}

/// Rows of a CSV file as name → column lookups.
fn csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
  let text = std::fs::read_to_string(path).unwrap();
  let mut lines = text.lines().filter(|l| !l.starts_with('#'));
  let header = lines.next().unwrap().split(',').map(String::from).collect();
  let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
  (header, rows)
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<String> {
  let k = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
  rows.iter().map(|r| r[k].clone()).collect()
}

fn short(mut cfg: ScenarioConfig, t_end: f64) -> ScenarioConfig {
  cfg.loads.t_end = t_end;
  if let Some(d) = &mut cfg.dns {
    d.t_end = t_end;
  }
  cfg
}

#[test]
fn negative_time_step_is_a_config_error_and_writes_nothing() {
  let tmp = tempfile::tempdir().unwrap();
  let out = tmp.path().join("out");
  let mut cfg = scenario("dns_validation");
  cfg.loads.dt = -0.01;
  assert_eq!(poroflate("run", &cfg, tmp.path(), &out), 2);
  assert!(!out.exists());
}

#[test]
fn missing_scenario_file_is_a_config_error() {
  let status = Command::new(env!("CARGO_BIN_EXE_poroflate")).args(["run", "--config", "/nonexistent/scenario.toml"]).env("RUST_LOG", "off").status().unwrap();
  assert_eq!(status.code(), Some(2));
}

#[test]
fn precompute_is_bit_identical_on_rerun() {
  let tmp = tempfile::tempdir().unwrap();
  let mut cfg = scenario("dns_validation");
  cfg.model = Model::E;
  let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
  assert_eq!(poroflate("precompute", &cfg, tmp.path(), &a), 0);
  assert_eq!(poroflate("precompute", &cfg, tmp.path(), &b), 0);
  let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
  names.sort();
  assert_eq!(names.len(), 3, "{names:?}");
  for n in names {
    assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
  }
  let l = tmp.path().join("l");
  cfg.model = Model::L;
  assert_eq!(poroflate("precompute", &cfg, tmp.path(), &l), 0);
  assert_eq!(std::fs::read_dir(&l).unwrap().count(), 2);
}

#[test]
fn repeated_runs_write_identical_tables() {
  let tmp = tempfile::tempdir().unwrap();
  let cfg = short(scenario("dns_validation"), 0.1);
  let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
  assert_eq!(poroflate("run", &cfg, tmp.path(), &a), 0);
  assert_eq!(poroflate("run", &cfg, tmp.path(), &b), 0);
  for n in ["steps.csv", "probes.csv", "fields_00010.vtk"] {
    assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n}");
  }
  let (header, rows) = csv(&a.join("probes.csv"));
  assert_eq!(header, ["t", "xp", "pf", "pc", "u1", "u2", "u3", "w_a", "w_e"]);
  assert_eq!(rows.len(), 10 * cfg.probes.len());
  let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
  assert_eq!(summary["status"], "completed");
  assert_eq!(summary["steps"], 10);
}

#[test]
fn zero_load_comparison_has_no_differences() {
  let tmp = tempfile::tempdir().unwrap();
  let mut cfg = short(scenario("dns_validation"), 0.05);
  let zero = TimeFunction::Constant { value: 0.0 };
  for p in &mut cfg.loads.pressure {
    p.value = zero.clone();
  }
  for t in &mut cfg.loads.traction {
    t.value = zero.clone();
  }
  cfg.dns.as_mut().unwrap().load = zero;
  let out = tmp.path().join("out");
  assert_eq!(poroflate("compare-dns", &cfg, tmp.path(), &out), 0);
  let (header, rows) = csv(&out.join("dns_comparison.csv"));
  assert!(!rows.is_empty());
  for col in ["dns", "homogenized", "relative_difference"] {
    assert!(column(&header, &rows, col).iter().all(|v| v.parse::<f64>().unwrap() == 0.0), "{col}");
  }
}

#[test]
fn closed_valves_carry_no_flux_and_both_models_agree() {
  let tmp = tempfile::tempdir().unwrap();
  let mut cfg = scenario("dns_validation");
  cfg.valves.kappa_a = 0.0;
  cfg.valves.kappa_e = 0.0;
  for model in [Model::L, Model::E] {
    cfg.model = model;
    let out = tmp.path().join(format!("{model:?}"));
    assert_eq!(poroflate("run", &cfg, tmp.path(), &out), 0);
    let (header, rows) = csv(&out.join("probes.csv"));
    for col in ["w_a", "w_e"] {
      assert!(column(&header, &rows, col).iter().all(|v| v.parse::<f64>().unwrap() == 0.0), "{model:?} {col}");
    }
  }
  cfg.model = Model::L;
  let out = tmp.path().join("comparison");
  assert_eq!(poroflate("compare-dns", &cfg, tmp.path(), &out), 0);
  let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("dns_comparison.json")).unwrap()).unwrap();
  assert_eq!(report["pass"], true);
}

#[test]
fn newton_divergence_exits_with_its_own_code_and_keeps_the_summary() {
  let tmp = tempfile::tempdir().unwrap();
  let mut cfg = scenario("steady_ramp");
  cfg.model = Model::E;
  let out = tmp.path().join("out");
  assert_eq!(poroflate("run", &cfg, tmp.path(), &out), 3);
  let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
  assert_ne!(summary["status"], "completed");
  assert!(summary["steps"].as_u64().unwrap() > 0);
  assert!(out.join("probes.csv").exists());
}

#[test]
fn reconstruction_writes_cell_fields() {
  let tmp = tempfile::tempdir().unwrap();
  let mut cfg = short(scenario("dns_validation"), 0.2);
  cfg.reconstruct = Some(toml::from_str("position = 0.5\nt = 0.2").unwrap());
  let out = tmp.path().join("out");
  assert_eq!(poroflate("reconstruct", &cfg, tmp.path(), &out), 0);
  let files: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
  assert!(files.iter().any(|f| f.ends_with(".vtk")) && files.iter().any(|f| f.ends_with(".json")), "{files:?}");
}

#[test]
fn reconstruction_without_a_section_is_a_config_error() {
  let tmp = tempfile::tempdir().unwrap();
  let cfg = scenario("dns_validation");
  assert_eq!(poroflate("reconstruct", &cfg, tmp.path(), &tmp.path().join("out")), 2);
}
