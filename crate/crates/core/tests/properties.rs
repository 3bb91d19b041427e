use std::sync::OnceLock;

use proptest::prelude::*;

use poroflate_core::homogenize::HomogenizedCoefficients;
use poroflate_core::macro_solver::*;
use poroflate_core::materials::Materials;
use poroflate_core::mesh::{build_macro_mesh, MacroGeometrySpec};
use poroflate_core::micro_cell::Pore;
use poroflate_core::tensor::{Mat, Tensor4};

proptest! {
  #[test]
  fn valve_fluxes_are_one_sided(pf in -1e7..1e7f64, pc in -1e7..1e7f64, dp in 0.0..5e6f64, ka in 0.0..1e-6f64, ke in 0.0..1e-6f64) {
    let v = ValveParams { kappa_a: ka, kappa_e: ke, delta_p: dp };
    let (wa, we) = v.fluxes(pf, pc);
    prop_assert!(wa >= 0.0 && we >= 0.0);
    prop_assert!(wa == 0.0 || we == 0.0);
    let (ga, ge) = valve_switch(pf, pc, dp);
    prop_assert!(!(ga && ge));
    prop_assert_eq!(ga, pf > pc);
    prop_assert_eq!(ge, pc > pf + dp);
    if wa > 0.0 { prop_assert!(ga); }
    if we > 0.0 { prop_assert!(ge); }
  }

  #[test]
  fn isotropic_elasticity_is_symmetric_and_positive(young in 1e3..1e10f64, poisson in -0.9..0.49f64, dim in 2usize..4) {
    let c = Tensor4::from_young_poisson(dim, young, poisson);
    prop_assert!(c.major_asymmetry() <= 1e-12 * c.max_abs());
    prop_assert!(c.minor_asymmetry() <= 1e-12 * c.max_abs());
    prop_assert!(c.min_eigenvalue_on_sym() > 0.0);
  }

  #[test]
  fn steps_are_piecewise_constant(t in 0.0..3.0f64) {
    let f = TimeFunction::Steps { times: vec![0.0, 1.0, 2.0], values: vec![1.0, 5.0, -2.0] };
    let expect = if t < 1.0 { 1.0 } else if t < 2.0 { 5.0 } else { -2.0 };
    prop_assert_eq!(f.eval(t), expect);
  }

  #[test]
  fn ramp_hold_stays_between_zero_and_peak(t in 0.0..10.0f64, peak in 1e3..1e7f64, drop in 0.0..1.0f64) {
    let f = TimeFunction::RampHold { peak, t1: 1.0, t2: 3.0, t3: 4.0, drop };
    let v = f.eval(t);
    prop_assert!(v >= -1e-9 * peak && v <= peak * (1.0 + 1e-12));
  }
}

/// Isotropic two-porosity coefficients with a strictly positive Biot modulus.
fn synthetic() -> &'static MacroSystem {
  static SYS: OnceLock<MacroSystem> = OnceLock::new();
  SYS.get_or_init(|| {
    let mats = Materials::default();
    let porous = HomogenizedCoefficients {
      dim: 2,
      a: Tensor4::from_young_poisson(2, 5e6, 0.3),
      b: [Mat::identity(2).scale(0.6), Mat::identity(2).scale(0.2)],
      m: [[3e-8, -1e-8], [-1e-8, 2e-8]],
      k: Mat::identity(2).scale(1e-9),
      phi: [0.2, 0.1],
      gamma: mats.gamma,
    };
    let problem = MacroProblem {
      mesh: build_macro_mesh(&MacroGeometrySpec::cantilever(2, 2, 6)).unwrap(),
      porous,
      sensitivities: None,
      substrate: mats.substrate.tensor(2),
      valves: ValveParams { kappa_a: 1e-7, kappa_e: 2e-7, delta_p: 1e5 },
      model: Model::L,
      loads: LoadProgram {
        dt: 0.01,
        t_end: 0.1,
        displacement: vec![DisplacementBc { boundary: Boundary::Left, components: vec![0, 1] }],
        pressure: vec![PressureBc { boundary: Boundary::Left, pore: Pore::Channel, value: TimeFunction::Constant { value: 0.0 } }],
        traction: Vec::new(),
      },
      newton: NewtonSettings::default(),
    };
    MacroSystem::new(problem).unwrap()
  })
}

proptest! {
  #![proptest_config(ProptestConfig::with_cases(32))]

  #[test]
  fn exchange_terms_cancel_for_any_state(seed in any::<u64>()) {
    use rand::{Rng, SeedableRng};
    let sys = synthetic();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut s = sys.initial_state();
    for v in s.pf.iter_mut().chain(s.pc.iter_mut()) {
      *v = rng.gen_range(-1e6..1e6);
    }
    for v in s.u.iter_mut() {
      *v = rng.gen_range(-1e-4..1e-4);
    }
    let prev = sys.initial_state();
    let (_, _, summary) = sys.assemble(&s, &prev, false);
    prop_assert!(summary.imbalance <= 1e-13, "{}", summary.imbalance);
  }

  #[test]
  fn limit_model_residual_is_linear_while_valves_are_shut(scale in 0.1..5.0f64) {
    // With p_c within [p_f, p_f + ΔP] no valve conducts and the residual scales with the state.
    let sys = synthetic();
    let mut s = sys.initial_state();
    s.pf.iter_mut().for_each(|v| *v = 5e3);
    s.pc.iter_mut().for_each(|v| *v = 1e4);
    let mut t = s.clone();
    for v in t.pf.iter_mut().chain(t.pc.iter_mut()) {
      *v *= scale;
    }
    let prev = sys.initial_state();
    let (r1, _, a) = sys.assemble(&s, &prev, false);
    let (r2, _, b) = sys.assemble(&t, &prev, false);
    prop_assert_eq!(a.admission + a.ejection, 0);
    prop_assert_eq!(b.admission + b.ejection, 0);
    let norm = r1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (x, y) in r1.iter().zip(&r2) {
      prop_assert!((y - scale * x).abs() <= 1e-9 * scale * norm);
    }
  }
}
