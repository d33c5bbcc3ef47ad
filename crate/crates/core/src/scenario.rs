//! Scenario files: everything needed to rebuild a run, in TOML.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decay::WeakScenario;
use crate::error::{HypoError, Result};
use crate::grid::{Grid, PhaseField, XBoundary};
use crate::models::{CollisionKind, ForceProfile, KineticModel, TemperatureProfile, TransportScheme};
use crate::steady::{SteadyMethod, SteadyOptions, StationaryState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    #[serde(default)]
    pub x_min: f64,
    pub lx: f64,
    pub nv: usize,
    pub v_max: f64,
    /// Time step; omitted means the transport limit.
    #[serde(default)]
    pub dt: Option<f64>,
    pub t_window: f64,
    #[serde(default)]
    pub boundary: XBoundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: CollisionKind,
    pub temperature: TemperatureProfile,
    #[serde(default)]
    pub force: ForceProfile,
    #[serde(default)]
    pub scheme: TransportScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Windows of length `t_window` integrated for rate fitting.
    pub windows: usize,
    pub seed: u64,
    pub output_dir: String,
    #[serde(default = "default_method")]
    pub steady_method: SteadyMethod,
}

fn default_method() -> SteadyMethod {
    SteadyMethod::Nullspace
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default)]
    pub steady_tol: Option<f64>,
    #[serde(default)]
    pub steady_max_iter: Option<usize>,
    /// Time cells of the certificate slab.
    #[serde(default)]
    pub slab_cells: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakConfig {
    pub half_width: f64,
    pub nx: usize,
    pub nv: usize,
    pub v_max: f64,
    pub delta: f64,
    pub cutoff_width: f64,
    pub t_window: f64,
    pub windows: usize,
    pub k: f64,
    pub ell: f64,
}

impl From<&WeakConfig> for WeakScenario {
    fn from(c: &WeakConfig) -> Self {
        Self {
            half_width: c.half_width,
            nx: c.nx,
            nv: c.nv,
            v_max: c.v_max,
            delta: c.delta,
            cutoff_width: c.cutoff_width,
            t_window: c.t_window,
            windows: c.windows,
            k: c.k,
            ell: c.ell,
        }
    }
}

impl From<&WeakScenario> for WeakConfig {
    fn from(c: &WeakScenario) -> Self {
        Self {
            half_width: c.half_width,
            nx: c.nx,
            nv: c.nv,
            v_max: c.v_max,
            delta: c.delta,
            cutoff_width: c.cutoff_width,
            t_window: c.t_window,
            windows: c.windows,
            k: c.k,
            ell: c.ell,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    pub weak: WeakConfig,
}

/// The bundled default scenario as TOML.
pub const DEFAULT_SCENARIO: &str = include_str!("../scenarios/default.toml");

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::from_toml(DEFAULT_SCENARIO).expect("bundled scenario parses")
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HypoError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Halve every mesh width `k` times.
    pub fn refined(&self, k: u32) -> Self {
        let mut c = self.clone();
        let f = 1usize << k;
        c.grid.nx *= f;
        c.grid.nv *= f;
        c.grid.dt = c.grid.dt.map(|dt| dt / f as f64);
        c.weak.nx *= f;
        c.weak.nv *= f;
        c
    }

    pub fn grid(&self) -> Result<Grid> {
        let g = &self.grid;
        let dt = g.dt.unwrap_or(g.lx / g.nx as f64 / g.v_max);
        Grid::with_boundary(g.nx, g.x_min, g.lx, g.nv, g.v_max, dt, g.t_window, g.boundary)
    }

    pub fn model(&self) -> Result<KineticModel> {
        let m = &self.model;
        KineticModel::new(self.grid()?, m.kind, &m.temperature, &m.force, m.scheme)
    }

    pub fn steady_options(&self) -> SteadyOptions {
        let mut o = SteadyOptions::default();
        if let Some(t) = self.tolerances.steady_tol {
            o.tol = t;
        }
        if let Some(n) = self.tolerances.steady_max_iter {
            o.max_iter = n;
        }
        o
    }

    /// Time step actually used: the configured one, capped by the model's limit.
    pub fn time_step(&self, model: &KineticModel) -> f64 {
        let limit = model.cfl_limit();
        let dt = self.grid.dt.map_or(limit, |d| d.min(limit));
        let per = (self.grid.t_window / dt).ceil();
        self.grid.t_window / per
    }

    pub fn weak_scenario(&self) -> WeakScenario {
        WeakScenario::from(&self.weak)
    }
}

/// Zero-mass initial datum used by the certificate and rate runs:
/// `(sin 2 pi x + v cos 2 pi x / 2) e^{-v^2/2}` minus its mass along `f_inf`.
pub fn default_initial(state: &StationaryState) -> PhaseField {
    let g = state.f_inf.grid;
    let mut f = PhaseField::from_fn(g, |x, v| {
        let p = 2.0 * std::f64::consts::PI * (x - g.x_min) / g.lx;
        (p.sin() + 0.5 * v * p.cos()) * (-0.5 * v * v).exp()
    });
    let m = f.mass() / state.f_inf.mass();
    f.axpy(-m, &state.f_inf);
    f
}
