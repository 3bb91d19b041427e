use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info};

use poroflate::stages;
use poroflate::{init_threads, Error, ScenarioConfig, THREADS_ENV};
use poroflate_core::macro_solver::Model;

#[derive(Parser)]
#[command(name = "poroflate", version, about = "Two-scale simulation of inflatable periodic poroelastic structures")]
struct Cli {
  #[command(subcommand)]
  command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
  /// Constant coefficients.
  L,
  /// Deformation-dependent coefficients.
  E,
}

#[derive(clap::Args)]
struct Common {
  /// Scenario file.
  #[arg(long, short)]
  config: PathBuf,
  /// Output directory; overrides the scenario.
  #[arg(long, short)]
  out: Option<PathBuf>,
  /// Model variant; overrides the scenario.
  #[arg(long, value_enum)]
  model: Option<ModelArg>,
  /// Worker threads.
  #[arg(long, env = THREADS_ENV)]
  threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
  /// Solve the cell problems and write coefficients and sensitivities.
  Precompute(Common),
  /// Run the macroscopic model.
  Run(Common),
  /// Channel permeability over a range of membrane permeabilities.
  SweepPermeability(Common),
  /// Compare the homogenized model with a direct simulation.
  CompareDns(Common),
  /// Expand the macroscopic solution over one cell.
  Reconstruct(Common),
}

fn execute(cli: Cli) -> Result<(), Error> {
  let (Command::Precompute(c) | Command::Run(c) | Command::SweepPermeability(c) | Command::CompareDns(c) | Command::Reconstruct(c)) = &cli.command;
  init_threads(c.threads);
  let cfg = ScenarioConfig::load(&c.config)?;
  let dir = c.out.clone().unwrap_or_else(|| cfg.output.clone());
  let model = match c.model {
    Some(ModelArg::L) => Model::L,
    Some(ModelArg::E) => Model::E,
    None => cfg.model,
  };
  let written = match &cli.command {
    Command::Precompute(_) => stages::precompute(&cfg, model, &dir)?.1,
    Command::Run(_) => {
      let (summary, files) = stages::run(&cfg, model, &dir)?;
      info!("{} steps, median {} Newton iterations", summary.steps, summary.median_iterations);
      files
    }
    Command::SweepPermeability(_) => {
      let rows = stages::sweep_permeability(&cfg)?;
      poroflate::output::ensure_dir(&dir)?;
      vec![stages::write_sweep(&rows, cfg.cell.dim, &dir.join("permeability_sweep.csv"))?]
    }
    Command::CompareDns(_) => {
      let report = stages::compare_dns(&cfg)?;
      info!("worst judged difference {:.3e} (tolerance {}), speedup {:.1}", report.worst_judged, report.tolerance, report.speedup);
      let files = stages::write_comparison(&report, &dir)?;
      if !report.pass {
        for f in &files {
          info!("wrote {}", f.display());
        }
        return Err(Error::Numerical { stage: "dns comparison", message: format!("difference {:.3e} above tolerance {}", report.worst_judged, report.tolerance) });
      }
      files
    }
    Command::Reconstruct(_) => stages::reconstruct(&cfg, model, &dir)?.1,
  };
  for f in written {
    info!("wrote {}", f.display());
  }
  Ok(())
}

fn main() -> ExitCode {
  env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
  match execute(Cli::parse()) {
    Ok(()) => ExitCode::SUCCESS,
    Err(e) => {
      error!("{e}");
      e.exit_code()
    }
  }
}
