//! Fixtures shared by the benchmarks.

use hypoflow_core::scenario::{default_initial, ScenarioConfig};
use hypoflow_core::{compute_stationary, KineticModel, PhaseField, StationaryState, SteadyMethod};

/// Bundled scenario resized to `n x n`.
pub fn config(n: usize) -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.grid.nx = n;
    c.grid.nv = n;
    c
}

pub struct Fixture {
    pub config: ScenarioConfig,
    pub model: KineticModel,
    pub state: StationaryState,
    pub f0: PhaseField,
}

pub fn fixture(n: usize) -> Fixture {
    let config = config(n);
    let model = config.model().expect("bundled scenario is valid");
    let state = compute_stationary(&model, SteadyMethod::Nullspace, &config.steady_options()).expect("stationary state");
    let f0 = default_initial(&state);
    Fixture { config, model, state, f0 }
}
