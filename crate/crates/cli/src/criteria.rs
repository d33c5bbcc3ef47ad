//! The acceptance suite. Every check is a [`LedgerLine`], so the outputs can
//! be diffed byte for byte between runs.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use hypoflow_core::bogovskii::{bogovskii_solve, poincare_constant, Slab, SlabWeights};
use hypoflow_core::coercivity::{build_test_functions, cutoff_gram_floor};
use hypoflow_core::decay::{interpolation_check, recursion_verify, MISFIT_THRESHOLD};
use hypoflow_core::evolution::{dissipation, evolve, Stepper};
use hypoflow_core::generator::{generator_adjoint_apply, generator_apply, operator_apply, GeneratorKind};
use hypoflow_core::grid::{fmt17, weighted_inner, weighted_norm_sq, Grid, PhaseField, XBoundary};
use hypoflow_core::kj::{assemble_kj, check_kj_bounds, representation_residual};
use hypoflow_core::models::{coll_apply, CollisionKind, ForceProfile, KineticModel, Potential, TemperatureProfile, TransportScheme};
use hypoflow_core::numerics::pairwise_sum;
use hypoflow_core::scenario::{default_initial, ScenarioConfig};
use hypoflow_core::steady::{compute_stationary, gibbs_state, stationarity_residual, StationaryState, SteadyMethod};
use hypoflow_core::{HypoError, LedgerLine, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pipeline::certify_scenario;

/// Result of one criterion.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: u8,
    pub title: &'static str,
    pub lines: Vec<LedgerLine>,
    /// Wall-clock limit in seconds, with whether it was met. Kept out of the
    /// CSV output, which must not depend on timing.
    pub budget: Option<(f64, bool)>,
    /// Extra CSV artifacts `(file name, body)`.
    pub artifacts: Vec<(String, String)>,
}

impl Outcome {
    fn new(id: u8, title: &'static str) -> Self {
        Self { id, title, lines: Vec::new(), budget: None, artifacts: Vec::new() }
    }

    fn timed(mut self, start: Instant, limit: f64) -> Self {
        let secs = start.elapsed().as_secs_f64();
        log::info!("criterion {} took {secs:.2} s (limit {limit} s)", self.id);
        self.budget = Some((limit, secs <= limit));
        self
    }

    pub fn passed(&self) -> bool {
        self.lines.iter().all(LedgerLine::holds) && self.budget.is_none_or(|b| b.1)
    }

    /// First failing line, for messages.
    pub fn first_failure(&self) -> Option<String> {
        if let Some(l) = self.lines.iter().find(|l| !l.holds()) {
            return Some(format!("{}: {} vs {}", l.name, l.lhs, l.rhs));
        }
        match self.budget {
            Some((limit, false)) => Some(format!("runtime over {limit} s")),
            _ => None,
        }
    }

    pub fn summary_line(&self) -> String {
        let verdict = if self.passed() { "pass" } else { "fail" };
        match self.first_failure() {
            Some(why) => format!("criterion {:>2} {verdict}: {} ({why})", self.id, self.title),
            None => format!("criterion {:>2} {verdict}: {} ({} checks)", self.id, self.title, self.lines.len()),
        }
    }
}

/// CSV of every check of every outcome.
pub fn outcomes_csv(outcomes: &[Outcome]) -> String {
    let mut s = String::from("criterion,check,relation,lhs,rhs,slack,holds\n");
    for o in outcomes {
        for l in &o.lines {
            let rel = match l.relation {
                hypoflow_core::Relation::Le => "le",
                hypoflow_core::Relation::Eq => "eq",
            };
            let _ = writeln!(s, "{},{},{rel},{},{},{},{}", o.id, l.name, fmt17(l.lhs), fmt17(l.rhs), fmt17(l.slack()), l.holds());
        }
        if let Some((limit, ok)) = o.budget {
            let _ = writeln!(s, "{},runtime_s,le,,{},,{ok}", o.id, fmt17(limit));
        }
    }
    s
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn random_field(grid: Grid, rng: &mut ChaCha8Rng) -> PhaseField {
    let values = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    PhaseField::from_values(grid, values).expect("length matches grid")
}

fn spread(values: &[f64]) -> f64 {
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let min = values.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    max / min
}

fn with_size(cfg: &ScenarioConfig, nx: usize, nv: usize) -> ScenarioConfig {
    let mut c = cfg.clone();
    c.grid.nx = nx;
    c.grid.nv = nv;
    c.grid.dt = None;
    c
}

/// Configuration model and its stationary state, shared between criteria.
pub struct Baseline {
    pub config: ScenarioConfig,
    pub model: KineticModel,
    pub state: StationaryState,
}

impl Baseline {
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        let model = config.model()?;
        let state = compute_stationary(&model, SteadyMethod::Nullspace, &config.steady_options())?;
        Ok(Self { config: config.clone(), model, state })
    }
}

/// Conservation, sign and adjointness checks on a 64 x 64 grid.
pub fn structure(cfg: &ScenarioConfig, seed: u64) -> Result<Outcome> {
    let start = Instant::now();
    let mut out = Outcome::new(1, "structure suite");
    let mut r = rng(seed, 1);
    for kind in [CollisionKind::Fp, CollisionKind::Bgk] {
        let tag = match kind {
            CollisionKind::Fp => "fp",
            CollisionKind::Bgk => "bgk",
        };
        let mut c = with_size(cfg, 64, 64);
        c.model.kind = kind;
        let m = c.model()?;
        let f_inf = compute_stationary(&m, SteadyMethod::Nullspace, &c.steady_options())?.f_inf;
        let vol = m.grid.cell_volume();

        let mut f = random_field(m.grid, &mut r);
        let abs = f.values.iter().map(|v| v.abs()).sum::<f64>() * vol;
        let m0 = f.mass();
        let mut stepper = Stepper::new(&m, 0.5 * m.cfl_limit())?;
        let mut drift = 0.0f64;
        for _ in 0..50 {
            stepper.step_in_place(&mut f);
            drift = drift.max((f.mass() - m0).abs() / abs);
        }
        out.lines.push(LedgerLine::le(format!("{tag}_mass_drift_per_step"), drift, 1e-12));

        let mut d_min = f64::INFINITY;
        for _ in 0..1000 {
            d_min = d_min.min(dissipation(&random_field(m.grid, &mut r), &m, &f_inf)?);
        }
        out.lines.push(LedgerLine::le(format!("{tag}_dissipation_min"), 0.0, d_min));

        let (mut anti, mut adj) = (0.0f64, 0.0f64);
        for _ in 0..20 {
            let f = random_field(m.grid, &mut r);
            let g = random_field(m.grid, &mut r);
            let nf = weighted_norm_sq(&f, &f_inf)?.sqrt();
            let ng = weighted_norm_sq(&g, &f_inf)?.sqrt();
            let a = operator_apply(GeneratorKind::AAnti, &f, &m, Some(&f_inf))?;
            anti = anti.max(weighted_inner(&f, &a, &f_inf)?.abs() / (nf * nf));
            let lhs = weighted_inner(&generator_apply(&f, &m)?, &g, &f_inf)?;
            let rhs = weighted_inner(&f, &generator_adjoint_apply(&g, &m, &f_inf)?, &f_inf)?;
            adj = adj.max((lhs - rhs).abs() / (nf * ng));
        }
        out.lines.push(LedgerLine::le(format!("{tag}_antisymmetric_form"), anti, 1e-10));
        out.lines.push(LedgerLine::le(format!("{tag}_adjointness"), adj, 1e-10));

        // Kernel: M for FP, c(x) M for BGK. Bounded by round-off of the stencil.
        let mut k = m.m.clone();
        if kind == CollisionKind::Bgk {
            for i in 0..m.grid.nx {
                let ci = 1.0 + 0.5 * (i as f64).sin();
                k.column_mut(i).iter_mut().for_each(|v| *v *= ci);
            }
        }
        let scale = k.values.iter().fold(0.0f64, |a, b| a.max(b.abs())) / m.grid.dv().powi(2);
        let ck = coll_apply(&k, &m)?;
        let worst = ck.values.iter().fold(0.0f64, |a, b| a.max(b.abs())) / scale;
        out.lines.push(LedgerLine::le(format!("{tag}_kernel_residual"), worst, 1e-14));
    }
    Ok(out.timed(start, 10.0))
}

/// Second-order energy balance defect on the configured scenario.
pub fn energy_balance(base: &Baseline) -> Result<Outcome> {
    let start = Instant::now();
    let mut out = Outcome::new(2, "energy balance");
    let m = &base.model;
    let f0 = default_initial(&base.state);
    let dt0 = 0.8 * m.cfl_limit();
    let steps0 = ((0.1 / dt0).round() as usize).max(4);
    let defects: Vec<f64> = (0..2)
        .map(|k| {
            let dt = dt0 / 2f64.powi(k);
            let steps = steps0 << k;
            evolve(&f0, m, &base.state.f_inf, dt, steps, steps).map(|t| t.max_balance_defect())
        })
        .collect::<Result<_>>()?;
    let ratio = defects[0] / defects[1];
    out.lines.push(LedgerLine::le("halving_ratio_low", 3.5, ratio));
    out.lines.push(LedgerLine::le("halving_ratio_high", ratio, 4.5));
    Ok(out.timed(start, 60.0))
}

/// Agreement of the two stationary solvers and the isothermal Gibbs check.
pub fn stationary(base: &Baseline) -> Result<Outcome> {
    let mut out = Outcome::new(3, "stationary state");
    let null = &base.state;
    let long = compute_stationary(&base.model, SteadyMethod::LongTime, &base.config.steady_options())?;
    let mut d = long.f_inf.clone();
    d.axpy(-1.0, &null.f_inf);
    out.lines.push(LedgerLine::le("method_distance", weighted_norm_sq(&d, &null.f_inf)?.sqrt(), 1e-6));
    out.lines.push(LedgerLine::le("nullspace_residual", null.residual, 1e-8));
    out.lines.push(LedgerLine::le("long_time_residual", long.residual, 1e-8));

    let pot = Potential::Cosine { amplitude: 0.5, mode: 1 };
    let res: Vec<f64> = [16usize, 32, 64]
        .iter()
        .map(|&n| {
            let g = base.config.grid();
            let g = g.and_then(|g| Grid::with_boundary(n, g.x_min, g.lx, n, g.v_max, g.dt, g.t_window, XBoundary::Periodic))?;
            let m = KineticModel::new(
                g,
                base.model.kind,
                &TemperatureProfile::Constant { value: 1.0 },
                &ForceProfile::PotentialGradient { potential: pot.clone() },
                TransportScheme::SecondOrder,
            )?;
            stationarity_residual(&m, &gibbs_state(&m, &pot))
        })
        .collect::<Result<_>>()?;
    for k in 0..2 {
        let order = (res[k] / res[k + 1]).log2();
        out.lines.push(LedgerLine::le(format!("gibbs_order_{}", 16 << k), 1.8, order));
    }
    Ok(out)
}

/// Moment identities, support and moment-matrix floor of the test functions.
pub fn test_functions(base: &Baseline) -> Result<Outcome> {
    let mut out = Outcome::new(4, "test functions");
    let tf = build_test_functions(&base.state, &base.model)?;
    out.lines.push(LedgerLine::le("moment_defect", tf.moment_defect(&base.state), 1e-10));
    out.lines.push(LedgerLine::eq("support_outside_unit_ball", if tf.support_in_unit_ball() { 0.0 } else { 1.0 }, 0.0));
    let floor = base.state.c_inf * cutoff_gram_floor(&base.model.grid);
    out.lines.push(LedgerLine::le("moment_floor", floor * (1.0 - 1e-12), tf.moment_floor()));
    Ok(out)
}

/// Horizon of the representation refinement study.
const REPRESENTATION_HORIZON: f64 = 0.25;

/// Representation residual under refinement and stability of the bound ratios.
pub fn representation(cfg: &ScenarioConfig) -> Result<Outcome> {
    let mut out = Outcome::new(5, "moment representation");
    let (mut res, mut rk, mut rj) = (Vec::new(), Vec::new(), Vec::new());
    for shift in [2u32, 1, 0] {
        let mut c = with_size(cfg, cfg.grid.nx >> shift, cfg.grid.nv >> shift);
        c.grid.t_window = REPRESENTATION_HORIZON;
        let m = c.model()?;
        let s = compute_stationary(&m, SteadyMethod::Nullspace, &c.steady_options())?;
        let tf = build_test_functions(&s, &m)?;
        let dt = c.time_step(&m);
        let steps = (REPRESENTATION_HORIZON / dt).round() as usize;
        let tr = evolve(&default_initial(&s), &m, &s.f_inf, dt, steps, 1)?;
        let kj = assemble_kj(&tr, &s, &m, &tf)?;
        res.push(representation_residual(&kj, &s));
        let b = check_kj_bounds(&kj, &tr.dissipation, dt, &s)?;
        rk.push(b.ratio_k);
        rj.push(b.ratio_j);
    }
    for k in 0..2 {
        out.lines.push(LedgerLine::le(format!("residual_reduction_{k}"), 1.8, res[k] / res[k + 1]));
    }
    out.lines.push(LedgerLine::le("k_ratio_spread", spread(&rk), 1.2));
    out.lines.push(LedgerLine::le("j_ratio_spread", spread(&rj), 1.2));
    Ok(out)
}

/// Smooth zero-mean source on a slab.
pub fn slab_source(s: &Slab) -> Vec<f64> {
    let mut g: Vec<f64> = (0..s.len())
        .map(|k| {
            let (n, i) = (k / s.nx, k % s.nx);
            let p = 2.0 * PI * (s.x(i) - s.x_min) / s.lx;
            p.sin() * (1.0 + 0.5 * (PI * s.t(n) / s.t_len).cos())
        })
        .collect();
    let mean = pairwise_sum(&g) / g.len() as f64;
    g.iter_mut().for_each(|v| *v -= mean);
    g
}

/// `lambda_2` at the configured grid coarsened `shift` times.
pub fn bogovskii_level(cfg: &ScenarioConfig, shift: u32) -> Result<hypoflow_core::bogovskii::BogovskiiReport> {
    let c = with_size(cfg, cfg.grid.nx >> shift, cfg.grid.nv >> shift);
    let m = c.model()?;
    let state = compute_stationary(&m, SteadyMethod::Nullspace, &c.steady_options())?;
    let slab = Slab::over(&m.grid, Slab::default_nt(&m.grid))?;
    let wt = SlabWeights::from_state(&slab, &state)?;
    bogovskii_solve(&slab_source(&slab), &slab, &wt, None)
}

/// Divergence solve accuracy, `lambda_2` stability and the flat Poincare constant.
pub fn bogovskii(cfg: &ScenarioConfig) -> Result<Outcome> {
    let mut out = Outcome::new(6, "space-time divergence solve");
    let mut l2 = Vec::new();
    for shift in [2u32, 1, 0] {
        let r = bogovskii_level(cfg, shift)?;
        let n = cfg.grid.nx >> shift;
        out.lines.push(LedgerLine::le(format!("divergence_residual_{n}"), r.divergence_residual, 1e-8));
        out.lines.push(LedgerLine::eq(format!("time_boundary_max_{n}"), r.boundary_max, 0.0));
        l2.push(r.lambda2.ok_or(HypoError::ZeroDissipation)?);
    }
    out.lines.push(LedgerLine::le("lambda2_spread", spread(&l2), 1.2));
    let n = cfg.grid.nx.max(128);
    let s = Slab::new(n, 1.0, n, 0.0, 1.0, XBoundary::Periodic)?;
    let cp = poincare_constant(&s, &SlabWeights::uniform(&s), &vec![1.0; n])?.c_p;
    let exact = 1.0 / (PI * PI);
    out.lines.push(LedgerLine::le("poincare_relative_error", (cp / exact - 1.0).abs(), 0.01));
    Ok(out)
}

/// Full certificate on the configured scenario.
pub fn certificate(base: &Baseline) -> Result<Outcome> {
    let start = Instant::now();
    let mut out = Outcome::new(7, "decay certificate");
    let run = certify_scenario(&base.config, &base.model, &base.state)?;
    let cert = &run.certificate;
    out.lines.extend(cert.ledger.iter().cloned());
    out.lines.push(LedgerLine::le("contraction_positive", 0.0, cert.contraction));
    out.lines.push(LedgerLine::le("contraction_below_one", cert.contraction, 1.0));
    out.lines.push(LedgerLine::le("rate_below_fit", cert.lambda_cert, run.fit.lambda));
    out.artifacts.push(("certificate_ledger.csv".into(), cert.ledger_csv()));
    Ok(out.timed(start, 600.0))
}

/// Synthetic recursion sequences and the interpolation inequality.
pub fn recursion(cfg: &ScenarioConfig, seed: u64) -> Result<Outcome> {
    let mut out = Outcome::new(8, "decay recursion");
    for a in [0.25, 0.5, 1.0] {
        for eps in [0.1, 0.5] {
            let r = recursion_verify(1.0, eps, a, 10_000)?;
            out.lines.push(LedgerLine::le(format!("implied_a{a}_eps{eps}"), 0.0, r.implied_slack));
            out.lines.push(LedgerLine::le(format!("telescoping_a{a}_eps{eps}"), 0.0, r.telescoping_slack));
            out.lines.push(LedgerLine::le(format!("slope_error_a{a}_eps{eps}"), r.slope_error(), 0.05));
        }
    }
    let weak = cfg.weak_scenario();
    let grid = weak.grid()?;
    let mut r = rng(seed, 8);
    let rows: Vec<Vec<f64>> = (0..1000).map(|_| (0..grid.nx).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    out.lines.push(LedgerLine::le("interpolation_min_slack", 0.0, interpolation_check(&rows, &grid, weak.k, weak.ell)));
    Ok(out)
}

/// Weak confinement: sub-exponential, monotone, bounded moments.
pub fn weak_confinement(cfg: &ScenarioConfig) -> Result<Outcome> {
    let mut out = Outcome::new(9, "weak confinement");
    let rep = cfg.weak_scenario().run()?;
    let y = &rep.series.y;
    let rise = y.windows(2).map(|p| p[1] - p[0]).fold(f64::NEG_INFINITY, f64::max);
    out.lines.push(LedgerLine::le("exponential_misfit", MISFIT_THRESHOLD, rep.fit.residual));
    out.lines.push(LedgerLine::le("norm_max_rise", rise, 0.0));
    out.lines.push(LedgerLine::le("moment_bound", rep.moments.c_k, f64::MAX));
    out.artifacts.push(("weak_series.csv".into(), rep.series.to_csv()));
    Ok(out)
}

/// Criteria 1 to 9 on `cfg`.
pub fn run_suite(cfg: &ScenarioConfig) -> Result<Vec<Outcome>> {
    let seed = cfg.run.seed;
    let mut outcomes = vec![structure(cfg, seed)?];
    let base = Baseline::new(cfg)?;
    outcomes.push(energy_balance(&base)?);
    outcomes.push(stationary(&base)?);
    outcomes.push(test_functions(&base)?);
    outcomes.push(representation(cfg)?);
    outcomes.push(bogovskii(cfg)?);
    outcomes.push(certificate(&base)?);
    outcomes.push(recursion(cfg, seed)?);
    outcomes.push(weak_confinement(cfg)?);
    Ok(outcomes)
}

/// Files in `a` and `b` whose bytes differ, or that exist in only one.
pub fn compare_dirs(a: &Path, b: &Path) -> std::io::Result<Vec<String>> {
    let names = |d: &Path| -> std::io::Result<Vec<String>> {
        let mut v: Vec<String> =
            std::fs::read_dir(d)?.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
        v.sort();
        Ok(v)
    };
    let (na, nb) = (names(a)?, names(b)?);
    let mut diff: Vec<String> = na.iter().filter(|n| !nb.contains(n)).chain(nb.iter().filter(|n| !na.contains(n))).cloned().collect();
    for n in na.iter().filter(|n| nb.contains(n)) {
        if std::fs::read(a.join(n))? != std::fs::read(b.join(n))? {
            diff.push(n.clone());
        }
    }
    Ok(diff)
}

/// Criterion 10 from two finished output directories.
pub fn reproducibility(a: &Path, b: &Path) -> std::io::Result<Outcome> {
    let mut out = Outcome::new(10, "reproducibility");
    let diff = compare_dirs(a, b)?;
    for d in &diff {
        log::warn!("selftest output {d} differs between runs");
    }
    let files = std::fs::read_dir(a)?.count();
    out.lines.push(LedgerLine::le("files_written", 1.0, files as f64));
    out.lines.push(LedgerLine::eq("files_differing", diff.len() as f64, 0.0));
    Ok(out)
}
