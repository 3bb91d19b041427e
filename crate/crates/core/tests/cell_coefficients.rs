use poroflate_core::homogenize::{check_invariants, compute_coefficients, evaluate, linear_grid, permeability_sweep};
use poroflate_core::materials::Materials;
use poroflate_core::mesh::{build_cell_mesh, CellGeometrySpec};
use poroflate_core::micro_cell::solve_correctors;
use poroflate_core::fem::Permeability;

fn unit_fluid() -> Materials {
  Materials { viscosity: 1.0, eps0: 1.0, ..Materials::default() }
}

fn straight_channel(resolution: usize) -> CellGeometrySpec {
  CellGeometrySpec { inclusion_radius: 0.0, stiff_shell_thickness: 0.0, ..CellGeometrySpec::paper_like(2, resolution) }
}

#[test]
fn straight_channel_permeability_is_plane_poiseuille() {
  let mesh = build_cell_mesh(&straight_channel(32)).unwrap();
  let mats = unit_fluid();
  let corr = solve_correctors(&mesh, &mats).unwrap();
  let (h, routes) = compute_coefficients(&mesh, &corr, &mats).unwrap();
  let w: f64 = 0.25;
  let exact = w.powi(3) / 12.0;
  assert!((h.k.m[0][0] - exact).abs() <= 0.02 * exact, "{} vs {exact}", h.k.m[0][0]);
  assert!(h.k.m[1][1].abs() <= 1e-12 * exact);
  assert!(routes.discrepancy().2 <= 1e-8);
}

#[test]
fn paper_cells_satisfy_the_coefficient_invariants() {
  for spec in [CellGeometrySpec::paper_like(2, 16), CellGeometrySpec::paper_like(3, 6)] {
    let mesh = build_cell_mesh(&spec).unwrap();
    let mats = Materials::default();
    let corr = solve_correctors(&mesh, &mats).unwrap();
    let (h, routes) = evaluate(&mesh, &corr, &mats);
    check_invariants(&mesh, &h, &routes).unwrap();
    // Flow only along the channel axis.
    assert!(h.k.m[0][0] > 0.0);
    for i in 1..spec.dim {
      assert!(h.k.m[i][i].abs() <= 1e-10 * h.k.m[0][0]);
    }
  }
}

#[test]
fn membrane_sweep_starts_blocked_and_grows_monotonically() {
  let spec = CellGeometrySpec { membrane_positions: vec![0.5], n_compartments: 2, ..CellGeometrySpec::paper_like(2, 16) };
  let mesh = build_cell_mesh(&spec).unwrap();
  let mut grid = linear_grid(0.0, 3.0, 6);
  grid.push(Permeability::Infinite);
  let sweep = permeability_sweep(&mesh, 1.0, &grid).unwrap();
  assert_eq!(sweep[0].1.m[0][0], 0.0);
  for w in sweep.windows(2) {
    assert!(w[1].1.m[0][0] >= w[0].1.m[0][0] * (1.0 - 1e-12));
  }
}
