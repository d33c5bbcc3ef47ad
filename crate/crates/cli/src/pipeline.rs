//! Multi-module runs shared by the subcommands and the acceptance suite.

use hypoflow_core::coercivity::{build_test_functions, lambda1_global};
use hypoflow_core::decay::{fit_exponential, ExpFit};
use hypoflow_core::evolution::evolve;
use hypoflow_core::scenario::{default_initial, ScenarioConfig};
use hypoflow_core::{certify, CertifyOptions, DecayCertificate, KineticModel, Result, StationaryState};

pub struct CertifyRun {
    pub certificate: DecayCertificate,
    pub fit: ExpFit,
    /// Window end times and relative norms behind `fit`.
    pub times: Vec<f64>,
    pub y: Vec<f64>,
}

/// Norm decay over `run.windows` windows from the default datum, fitted by
/// an exponential. `y` is the weighted norm relative to its initial value.
pub fn rate_fit(cfg: &ScenarioConfig, model: &KineticModel, state: &StationaryState) -> Result<(Vec<f64>, Vec<f64>, ExpFit)> {
    let f0 = default_initial(state);
    let t = cfg.grid.t_window;
    let dt = cfg.time_step(model);
    let per = (t / dt).round() as usize;
    let windows = cfg.run.windows;
    let traj = evolve(&f0, model, &state.f_inf, dt, per * windows, per)?;
    let n0 = traj.norm_sq[0];
    let times: Vec<f64> = (0..=windows).map(|w| w as f64 * t).collect();
    let y: Vec<f64> = (0..=windows).map(|w| (traj.norm_sq[w * per] / n0).sqrt()).collect();
    let fit = fit_exponential(&times, &y)?;
    Ok((times, y, fit))
}

pub fn certify_scenario(cfg: &ScenarioConfig, model: &KineticModel, state: &StationaryState) -> Result<CertifyRun> {
    let tf = build_test_functions(state, model)?;
    let (lambda1, _) = lambda1_global(state, model)?;
    let opts = CertifyOptions { slab_cells: cfg.tolerances.slab_cells, ..CertifyOptions::default() };
    let cert = certify(&default_initial(state), model, state, &tf, lambda1, &opts)?;
    let (times, y, fit) = rate_fit(cfg, model, state)?;
    log::info!("lambda_cert {:e}, lambda_fit {:e}", cert.lambda_cert, fit.lambda);
    Ok(CertifyRun { certificate: cert.with_fit(fit.lambda), fit, times, y })
}
