use hypoflow_core::bogovskii::{bogovskii_solve, Slab, SlabWeights};
use hypoflow_core::scenario::default_initial;
use hypoflow_core::*;

fn small() -> (ScenarioConfig, KineticModel, StationaryState) {
    let mut c = ScenarioConfig::default();
    c.grid.nx = 32;
    c.grid.nv = 32;
    let m = c.model().unwrap();
    let s = compute_stationary(&m, SteadyMethod::Nullspace, &c.steady_options()).unwrap();
    (c, m, s)
}

#[test]
fn certificate_on_coarse_default_scenario() {
    let (_, m, s) = small();
    let tf = build_test_functions(&s, &m).unwrap();
    let (lambda1, per) = lambda1_global(&s, &m).unwrap();
    assert_eq!(per.len(), 32);
    assert!(lambda1 > 0.0 && lambda1.is_finite());
    let f0 = default_initial(&s);
    assert!(f0.mass().abs() < 1e-14);
    let cert = certify(&f0, &m, &s, &tf, lambda1, &CertifyOptions::default()).unwrap();
    assert!(cert.ledger_holds(), "{}", cert.ledger_csv());
    assert!(cert.contraction > 0.0 && cert.contraction < 1.0);
    assert!(cert.final_norm_sq <= cert.contraction * cert.initial_norm_sq);
    assert!(cert.lambda2 >= cert.lambda2_measured);
}

#[test]
fn divergence_solve_on_stationary_weights() {
    let (_, m, s) = small();
    let slab = Slab::over(&m.grid, Slab::default_nt(&m.grid)).unwrap();
    let wt = SlabWeights::from_state(&slab, &s).unwrap();
    let g: Vec<f64> = (0..slab.len()).map(|k| (2.0 * std::f64::consts::PI * slab.x(k % slab.nx)).cos()).collect();
    let r = bogovskii_solve(&g, &slab, &wt, None).unwrap();
    assert!(r.divergence_residual <= 1e-8);
    assert_eq!(r.boundary_max, 0.0);
    let div = r.field.divergence();
    let err = div.iter().zip(&g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-8, "{err}");
}

#[test]
fn trajectory_decays_monotonically() {
    let (c, m, s) = small();
    let dt = c.time_step(&m);
    let steps = (c.grid.t_window / dt).round() as usize;
    let tr = evolve(&default_initial(&s), &m, &s.f_inf, dt, steps, steps).unwrap();
    assert!(tr.norm_sq.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-12)));
    assert!(tr.dissipation.iter().all(|&d| d >= 0.0));
    assert!(tr.final_field().is_some());
}

#[test]
fn snapshot_round_trip_through_disk() {
    let (_, _, s) = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.bin");
    s.f_inf.save(&path).unwrap();
    let back = PhaseField::load(&path, s.f_inf.grid).unwrap();
    assert_eq!(back.values, s.f_inf.values);
}
