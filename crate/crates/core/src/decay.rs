//! Rate fitting, the algebraic-decay recursion, interpolation between
//! moment weights, and the weakly confined scenario.

use std::fmt::Write as _;

use crate::error::{HypoError, Result};
use crate::evolution::evolve_with;
use crate::grid::{fmt17, local_density, trapezoid, Grid, PhaseField, XBoundary};
use crate::models::{CollisionKind, ForceProfile, KineticModel, TemperatureProfile, TransportScheme};
use crate::numerics::pairwise_sum_by;
use crate::steady::{compute_stationary, SteadyMethod, SteadyOptions, StationaryState};

/// RMS log-residual above which an exponential fit is flagged as a misfit.
pub const MISFIT_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpFit {
    pub lambda: f64,
    pub intercept: f64,
    /// RMS residual of `ln Y` about the fitted line over the tail.
    pub residual: f64,
    pub misfit: bool,
}

/// Least-squares line through `(x, y)`: `(slope, intercept, rms residual)`.
fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
    (slope, icpt, (rss / n).sqrt())
}

/// Fit `Y_n ~ e^{-lambda t_n}` over the tail half of the series.
pub fn fit_exponential(times: &[f64], y: &[f64]) -> Result<ExpFit> {
    if times.len() != y.len() {
        return Err(HypoError::DimensionMismatch("times and values differ in length".into()));
    }
    if y.len() < 5 {
        return Err(HypoError::InsufficientData(format!("{} windows, need at least 5", y.len())));
    }
    if y.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(HypoError::InsufficientData("series has non-positive values".into()));
    }
    let start = y.len() / 2;
    let logs: Vec<f64> = y[start..].iter().map(|v| v.ln()).collect();
    let (slope, intercept, residual) = line_fit(&times[start..], &logs);
    let misfit = residual > MISFIT_THRESHOLD;
    if misfit {
        log::info!("exponential fit residual {residual:e} exceeds {MISFIT_THRESHOLD:e}");
    }
    Ok(ExpFit { lambda: -slope, intercept, residual, misfit })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecursionReport {
    pub epsilon: f64,
    pub a: f64,
    pub y: Vec<f64>,
    /// Smallest slack of `Y_{n+1}^2 <= Y_n^2 - eps 2^{-2(1+a)} Y_n^{2(1+a)}`, relative to `Y_n^2`.
    pub implied_slack: f64,
    /// Smallest slack of `1/Y_{n+1}^{2a} - 1/Y_n^{2a} >= 2 a eps 2^{-2(1+a)}`, relative to the bound.
    pub telescoping_slack: f64,
    /// Log-log slope of `Y_n` against `n` over the last half.
    pub tail_slope: f64,
}

impl RecursionReport {
    pub fn target_slope(&self) -> f64 {
        -1.0 / (2.0 * self.a)
    }

    pub fn inequalities_hold(&self) -> bool {
        self.implied_slack >= -1e-12 && self.telescoping_slack >= -1e-9
    }

    pub fn slope_error(&self) -> f64 {
        (self.tail_slope / self.target_slope() - 1.0).abs()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,y,inv_y_pow\n");
        for (n, y) in self.y.iter().enumerate() {
            let _ = writeln!(s, "{n},{},{}", fmt17(*y), fmt17(y.powf(-2.0 * self.a)));
        }
        s
    }
}

/// Next term of the extremal sequence, `eps y^{2(1+a)} + y^2 = prev^2`.
fn next_term(prev: f64, eps: f64, a: f64, step: usize) -> Result<f64> {
    let target = prev * prev;
    let phi = |y: f64| eps * y.powf(2.0 * (1.0 + a)) + y * y - target;
    let (mut lo, mut hi) = (0.0, prev);
    if phi(hi) < 0.0 {
        return Err(HypoError::BisectionFailure(step));
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-14 * hi {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(HypoError::BisectionFailure(step))
}

/// Generate the extremal sequence of the recursion and check its consequences.
pub fn recursion_verify(y0: f64, eps: f64, a: f64, n: usize) -> Result<RecursionReport> {
    if !(0.0..=1.0).contains(&y0) || !(eps > 0.0 && eps < 1.0) || !(a > 0.0 && a <= 1.0) {
        return Err(HypoError::InvalidModel(format!("recursion needs Y0 in [0,1], eps in (0,1), a in (0,1]; got {y0}, {eps}, {a}")));
    }
    let c = eps * 2f64.powf(-2.0 * (1.0 + a));
    let mut y = Vec::with_capacity(n + 1);
    y.push(y0);
    let mut implied_slack = f64::INFINITY;
    let mut telescoping_slack = f64::INFINITY;
    for step in 0..n {
        let prev = y[step];
        if prev == 0.0 {
            y.push(0.0);
            continue;
        }
        let next = next_term(prev, eps, a, step)?;
        let bound = prev * prev - c * prev.powf(2.0 * (1.0 + a));
        implied_slack = implied_slack.min((bound - next * next) / (prev * prev));
        let gain = next.powf(-2.0 * a) - prev.powf(-2.0 * a);
        let need = 2.0 * a * c;
        telescoping_slack = telescoping_slack.min((gain - need) / need);
        y.push(next);
    }
    if implied_slack.is_infinite() {
        implied_slack = 0.0;
        telescoping_slack = 0.0;
    }
    let start = (n / 2).max(1);
    let tail_slope = if y[n] > 0.0 && n >= 4 {
        let xs: Vec<f64> = (start..=n).map(|m| (m as f64).ln()).collect();
        let ys: Vec<f64> = (start..=n).map(|m| y[m].ln()).collect();
        line_fit(&xs, &ys).0
    } else {
        0.0
    };
    Ok(RecursionReport { epsilon: eps, a, y, implied_slack, telescoping_slack, tail_slope })
}

/// `(1 + x^2)^{1/2}` at the cell centers.
fn bracket(grid: &Grid) -> Vec<f64> {
    (0..grid.nx).map(|i| (1.0 + grid.x(i).powi(2)).sqrt()).collect()
}

/// Relative slack `(rhs - lhs) / rhs` of
/// `||g p^ell|| <= ||g||^{1 - ell/k} ||g p^k||^{ell/k}` with `p = (1 + x^2)^{1/2}`.
pub fn interpolation_slack(g: &[f64], grid: &Grid, k: f64, ell: f64) -> f64 {
    let p = bracket(grid);
    let norm = |e: f64| (pairwise_sum_by(g.len(), |i| (g[i] * p[i].powf(e)).powi(2)) * grid.dx()).sqrt();
    let lhs = norm(ell);
    let th = ell / k;
    let rhs = norm(0.0).powf(1.0 - th) * norm(k).powf(th);
    if rhs == 0.0 {
        0.0
    } else {
        (rhs - lhs) / rhs
    }
}

/// Smallest interpolation slack over density rows.
pub fn interpolation_check(rows: &[Vec<f64>], grid: &Grid, k: f64, ell: f64) -> f64 {
    rows.iter().map(|r| interpolation_slack(r, grid, k, ell)).fold(f64::INFINITY, f64::min)
}

/// `int_cell (1 + x^2)^k dx`, exact for integer `k`, Gauss-Legendre otherwise.
fn cell_moment_weight(a: f64, b: f64, k: f64) -> f64 {
    if k.fract() == 0.0 && k >= 0.0 {
        let k = k as u32;
        let mut binom = 1.0;
        let mut total = 0.0;
        for j in 0..=k {
            let e = 2 * j + 1;
            total += binom * (b.powi(e as i32) - a.powi(e as i32)) / e as f64;
            binom = binom * (k - j) as f64 / (j + 1) as f64;
        }
        total
    } else {
        const NODES: [(f64, f64); 5] = [
            (0.0, 0.568_888_888_888_888_9),
            (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
            (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
            (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
            (0.906_179_845_938_664, 0.236_926_885_056_189_1),
        ];
        let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
        NODES.iter().map(|(s, w)| w * h * (1.0 + (c + h * s).powi(2)).powf(k)).sum()
    }
}

/// `int rho^2 (1 + x^2)^k dx` for a cellwise constant density.
pub fn moment(rho: &[f64], grid: &Grid, k: f64) -> f64 {
    let dx = grid.dx();
    pairwise_sum_by(rho.len(), |i| {
        let a = grid.x_min + i as f64 * dx;
        rho[i] * rho[i] * cell_moment_weight(a, a + dx, k)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentSeries {
    pub k: f64,
    pub values: Vec<f64>,
    pub c_k: f64,
    /// Whether the last tenth of the run is still increasing.
    pub growing_at_end: bool,
}

pub fn moment_track(rows: &[Vec<f64>], grid: &Grid, k: f64) -> MomentSeries {
    let values: Vec<f64> = rows.iter().map(|r| moment(r, grid, k)).collect();
    let c_k = values.iter().fold(0.0f64, |a, &b| a.max(b));
    let n = values.len();
    let tail = (n / 10).max(1);
    let growing_at_end = n > tail && values[n - 1] > values[n - 1 - tail];
    if growing_at_end {
        log::info!("moment of order {k} still growing at final time");
    }
    MomentSeries { k, values, c_k, growing_at_end }
}

/// Largest `eps` with `eps min(N/T, (N/T)^{1+a}) <= int D` over every window,
/// where `N` is the window integral of `||f||^2`.
pub fn min_form_epsilon(norm_integrals: &[f64], dissipation_integrals: &[f64], t: f64, a: f64) -> f64 {
    norm_integrals
        .iter()
        .zip(dissipation_integrals)
        .filter(|(n, _)| **n > 0.0)
        .map(|(n, d)| {
            let q = n / t;
            d / q.min(q.powf(1.0 + a))
        })
        .fold(f64::INFINITY, f64::min)
}

/// `Y_n` at window ends, in the weighted norm.
#[derive(Debug, Clone, PartialEq)]
pub struct DecaySeries {
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    pub a: f64,
}

impl DecaySeries {
    pub fn is_monotone(&self) -> bool {
        self.y.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-12))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,t,y,inv_y_pow,local_slope\n");
        for n in 0..self.y.len() {
            let slope = if n > 1 { (self.y[n].ln() - self.y[n - 1].ln()) / ((n as f64).ln() - ((n - 1) as f64).ln()) } else { 0.0 };
            let _ = writeln!(s, "{n},{},{},{},{}", fmt17(self.times[n]), fmt17(self.y[n]), fmt17(self.y[n].powf(-2.0 * self.a)), fmt17(slope));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakScenario {
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

impl Default for WeakScenario {
    fn default() -> Self {
        Self { half_width: 40.0, nx: 160, nv: 32, v_max: 6.0, delta: 0.5, cutoff_width: 4.0, t_window: 5.0, windows: 16, k: 2.0, ell: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct WeakReport {
    pub series: DecaySeries,
    pub fit: ExpFit,
    pub moments: MomentSeries,
    pub epsilon: f64,
    pub interpolation_slack: f64,
    pub recursion: Option<RecursionReport>,
}

impl WeakScenario {
    pub fn grid(&self) -> Result<Grid> {
        let dx = 2.0 * self.half_width / self.nx as f64;
        Grid::with_boundary(self.nx, -self.half_width, 2.0 * self.half_width, self.nv, self.v_max, dx / self.v_max, self.t_window, XBoundary::Specular)
    }

    pub fn model(&self) -> Result<KineticModel> {
        let force = ForceProfile::WeakDecay { delta: self.delta, cutoff_width: self.cutoff_width };
        KineticModel::new(self.grid()?, CollisionKind::Fp, &TemperatureProfile::Constant { value: 1.0 }, &force, TransportScheme::Upwind)
    }

    /// Zero-mass datum spread over the box.
    pub fn initial(&self, state: &StationaryState) -> PhaseField {
        let x0 = self.half_width;
        let mut f = PhaseField::from_fn(state.f_inf.grid, |x, v| {
            let c = x / x0 + 0.5 * (3.0 * std::f64::consts::PI * x / x0).sin();
            c * (1.0 + 0.3 * v) * (-0.5 * v * v).exp()
        });
        let m = f.mass() / state.f_inf.mass();
        f.axpy(-m, &state.f_inf);
        f
    }

    pub fn run(&self) -> Result<WeakReport> {
        let model = self.model()?;
        let state = compute_stationary(&model, SteadyMethod::Nullspace, &SteadyOptions::default())?;
        let f0 = self.initial(&state);
        let steps_per = (self.t_window / model.cfl_limit()).ceil() as usize;
        let dt = self.t_window / steps_per as f64;
        let steps = steps_per * self.windows;
        let mut rows = Vec::new();
        let traj = evolve_with(&f0, &model, &state.f_inf, dt, steps, usize::MAX, |n, f| {
            if n % steps_per == 0 {
                rows.push(local_density(f).values);
            }
            Ok(())
        })?;
        let scale = traj.norm_sq[0].sqrt();
        let times: Vec<f64> = (0..=self.windows).map(|n| n as f64 * self.t_window).collect();
        let y: Vec<f64> = (0..=self.windows).map(|n| traj.norm_sq[n * steps_per].sqrt() / scale).collect();
        let a = self.ell / self.k;
        let series = DecaySeries { times: times.clone(), y, a };
        let fit = fit_exponential(&times, &series.y)?;
        let moments = moment_track(&rows, &model.grid, self.k);
        let (mut ni, mut di) = (Vec::new(), Vec::new());
        for w in 0..self.windows {
            let r = w * steps_per..=(w + 1) * steps_per;
            ni.push(trapezoid(&traj.norm_sq[r.clone()], dt) / (scale * scale));
            di.push(trapezoid(&traj.dissipation[r], dt) / (scale * scale));
        }
        let epsilon = min_form_epsilon(&ni, &di, self.t_window, a);
        let interpolation_slack = interpolation_check(&rows, &model.grid, self.k, self.ell);
        let recursion = if epsilon > 0.0 && epsilon.is_finite() {
            Some(recursion_verify(series.y[0].min(1.0), epsilon.min(0.99), a, self.windows)?)
        } else {
            None
        };
        Ok(WeakReport { series, fit, moments, epsilon, interpolation_slack, recursion })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_exponential_rate() {
        let t = 0.7;
        let times: Vec<f64> = (0..12).map(|n| n as f64 * t).collect();
        let y: Vec<f64> = (0..12).map(|n| (-(n as f64)).exp()).collect();
        let fit = fit_exponential(&times, &y).unwrap();
        assert!((fit.lambda * t - 1.0).abs() < 1e-12);
        assert!(!fit.misfit);
        let y: Vec<f64> = (0..12).map(|n| (1.0 + n as f64).powi(-2)).collect();
        assert!(fit_exponential(&times, &y).unwrap().misfit);
        assert!(matches!(fit_exponential(&times[..4], &y[..4]), Err(HypoError::InsufficientData(_))));
    }

    #[test]
    fn telescoping_bound() {
        let r = recursion_verify(1.0, 0.5, 1.0, 64).unwrap();
        assert!(r.inequalities_hold());
        assert!(r.y[64] <= 5f64.powf(-0.5));
        let z = recursion_verify(0.0, 0.5, 1.0, 10).unwrap();
        assert!(z.y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recursion_slopes() {
        for a in [0.25, 0.5, 1.0] {
            for eps in [0.1, 0.5] {
                let r = recursion_verify(1.0, eps, a, 10_000).unwrap();
                assert!(r.inequalities_hold(), "{a} {eps}");
                assert!(r.slope_error() < 0.05, "{a} {eps} {}", r.tail_slope);
            }
        }
    }

    #[test]
    fn interpolation_inequality() {
        let grid = Grid::with_boundary(64, -8.0, 16.0, 4, 3.0, 0.1, 1.0, XBoundary::Specular).unwrap();
        let mut atom = vec![0.0; 64];
        atom[50] = 2.0;
        assert!(interpolation_slack(&atom, &grid, 2.0, 1.0).abs() < 1e-14);
        assert_eq!(interpolation_slack(&vec![0.0; 64], &grid, 2.0, 1.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Vec<f64>> = (0..1000).map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        assert!(interpolation_check(&rows, &grid, 2.0, 1.0) >= 0.0);
    }

    #[test]
    fn homogeneous_moment() {
        let x = 40.0;
        let grid = Grid::with_boundary(80, -x, 2.0 * x, 4, 3.0, 0.1, 1.0, XBoundary::Specular).unwrap();
        let c = 0.3;
        let exact = c * c * (2.0 * x + 4.0 * x.powi(3) / 3.0 + 2.0 * x.powi(5) / 5.0);
        assert!((moment(&vec![c; 80], &grid, 2.0) / exact - 1.0).abs() < 1e-10);
        let series = moment_track(&[vec![0.0; 80]], &grid, 2.0);
        assert_eq!(series.c_k, 0.0);
        let frac = moment(&vec![1.0; 80], &grid, 1.5);
        assert!(frac > 0.0 && frac < moment(&vec![1.0; 80], &grid, 2.0));
    }

    #[test]
    fn min_form_constant() {
        let eps = min_form_epsilon(&[2.0, 0.5], &[1.0, 0.1], 1.0, 0.5);
        assert!((eps - (0.1 / 0.5f64.powf(1.5))).abs() < 1e-12);
    }
}
