//! Divergence solver on the space-time slab `[0, T] x X` with vanishing
//! time-boundary values, and the weighted bounds it satisfies.
//!
//! Staggered layout: `F0` lives on time faces, `F1` on space faces, the
//! source `g` on cells. Cells are `(k, i)` with `k` the time index.

use rayon::prelude::*;

use crate::error::{HypoError, Result};
use crate::grid::{Grid, XBoundary};
use crate::ledger::LedgerLine;
use crate::numerics::{conjugate_gradient, dot, pairwise_sum, pairwise_sum_by, BandedCholesky, CgReport};
use crate::steady::StationaryState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slab {
    pub nt: usize,
    pub nx: usize,
    pub t_len: f64,
    pub x_min: f64,
    pub lx: f64,
    pub boundary: XBoundary,
}

impl Slab {
    pub fn new(nt: usize, t_len: f64, nx: usize, x_min: f64, lx: f64, boundary: XBoundary) -> Result<Self> {
        if nt < 3 || nx < 3 || !(t_len > 0.0) || !(lx > 0.0) {
            return Err(HypoError::InvalidGrid(format!("slab {nt} x {nx} over {t_len} x {lx}")));
        }
        Ok(Self { nt, nx, t_len, x_min, lx, boundary })
    }

    /// Slab over the spatial grid with `nt` time cells spanning the window.
    pub fn over(grid: &Grid, nt: usize) -> Result<Self> {
        Self::new(nt, grid.t_window, grid.nx, grid.x_min, grid.lx, grid.x_boundary)
    }

    /// Time cells defaulting to the spatial resolution: `max(4, round(T / dx))`.
    pub fn default_nt(grid: &Grid) -> usize {
        ((grid.t_window / grid.dx()).round() as usize).max(4)
    }

    pub fn tau(&self) -> f64 {
        self.t_len / self.nt as f64
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.tau() * self.dx()
    }

    pub fn len(&self) -> usize {
        self.nt * self.nx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn t(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.tau()
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }

    pub fn x_face(&self, f: usize) -> f64 {
        self.x_min + f as f64 * self.dx()
    }

    pub fn periodic(&self) -> bool {
        self.boundary == XBoundary::Periodic
    }

    /// Number of space faces per time row.
    pub fn n_xfaces(&self) -> usize {
        if self.periodic() {
            self.nx
        } else {
            self.nx + 1
        }
    }

    /// Cells on either side of space face `f`, when both exist.
    pub fn x_face_cells(&self, f: usize) -> Option<(usize, usize)> {
        if self.periodic() {
            Some(((f + self.nx - 1) % self.nx, f))
        } else if f == 0 || f == self.nx {
            None
        } else {
            Some((f - 1, f))
        }
    }

    pub fn right_face(&self, i: usize) -> usize {
        if self.periodic() {
            (i + 1) % self.nx
        } else {
            i + 1
        }
    }

    /// Signed separation `x - c`, wrapped into half a period when periodic.
    fn x_sep(&self, x: f64, c: f64) -> f64 {
        let d = x - c;
        if self.periodic() {
            d - self.lx * (d / self.lx).round()
        } else {
            d
        }
    }
}

/// `(F0, F1)` on the staggered slab grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeVectorField {
    pub slab: Slab,
    /// `(nt + 1) x nx`, row `k` is the time face at `t = k tau`.
    pub f0: Vec<f64>,
    /// `nt x n_xfaces`.
    pub f1: Vec<f64>,
}

impl SpaceTimeVectorField {
    pub fn zeros(slab: Slab) -> Self {
        Self { slab, f0: vec![0.0; (slab.nt + 1) * slab.nx], f1: vec![0.0; slab.nt * slab.n_xfaces()] }
    }

    pub fn divergence(&self) -> Vec<f64> {
        let s = self.slab;
        let (nx, nf) = (s.nx, s.n_xfaces());
        let (tau, dx) = (s.tau(), s.dx());
        let mut out = vec![0.0; s.len()];
        for k in 0..s.nt {
            for i in 0..nx {
                let dt0 = (self.f0[(k + 1) * nx + i] - self.f0[k * nx + i]) / tau;
                let dx1 = (self.f1[k * nf + s.right_face(i)] - self.f1[k * nf + i]) / dx;
                out[k * nx + i] = dt0 + dx1;
            }
        }
        out
    }

    /// Largest `|F|` on the time boundary faces.
    pub fn boundary_max(&self) -> f64 {
        let (nx, nt) = (self.slab.nx, self.slab.nt);
        self.f0[..nx].iter().chain(&self.f0[nt * nx..]).fold(0.0f64, |a, &b| a.max(b.abs()))
    }

    pub fn axpy(&mut self, a: f64, other: &Self) {
        self.f0.iter_mut().zip(&other.f0).for_each(|(x, y)| *x += a * y);
        self.f1.iter_mut().zip(&other.f1).for_each(|(x, y)| *x += a * y);
    }

    /// Component values and gradients at cell centers: `(F, dF)` with
    /// `dF[i][j] = d_j F_i`.
    pub fn at_cells(&self) -> ([Vec<f64>; 2], [[Vec<f64>; 2]; 2]) {
        let s = self.slab;
        let (nt, nx, nf) = (s.nt, s.nx, s.n_xfaces());
        let (tau, dx) = (s.tau(), s.dx());
        let n = s.len();
        let mut c0 = vec![0.0; n];
        let mut c1 = vec![0.0; n];
        let mut d00 = vec![0.0; n];
        let mut d11 = vec![0.0; n];
        for k in 0..nt {
            for i in 0..nx {
                let (lo, hi) = (self.f0[k * nx + i], self.f0[(k + 1) * nx + i]);
                c0[k * nx + i] = 0.5 * (lo + hi);
                d00[k * nx + i] = (hi - lo) / tau;
                let (l, r) = (self.f1[k * nf + i], self.f1[k * nf + s.right_face(i)]);
                c1[k * nx + i] = 0.5 * (l + r);
                d11[k * nx + i] = (r - l) / dx;
            }
        }
        let mut d01 = vec![0.0; n];
        let mut d10 = vec![0.0; n];
        for k in 0..nt {
            for i in 0..nx {
                // d_x F0 by centered differences of cell values, one-sided at walls.
                d01[k * nx + i] = if s.periodic() {
                    (c0[k * nx + (i + 1) % nx] - c0[k * nx + (i + nx - 1) % nx]) / (2.0 * dx)
                } else if i == 0 {
                    (c0[k * nx + 1] - c0[k * nx]) / dx
                } else if i + 1 == nx {
                    (c0[k * nx + i] - c0[k * nx + i - 1]) / dx
                } else {
                    (c0[k * nx + i + 1] - c0[k * nx + i - 1]) / (2.0 * dx)
                };
                // d_t F1 with the vanishing time-boundary value as ghost.
                let below = if k == 0 { -c1[i] } else { c1[(k - 1) * nx + i] };
                let above = if k + 1 == nt { -c1[k * nx + i] } else { c1[(k + 1) * nx + i] };
                d10[k * nx + i] = (above - below) / (2.0 * tau);
            }
        }
        ([c0, c1], [[d00, d01], [d10, d11]])
    }
}

/// Spatial weights on the slab: `e^{-Phi} = rho_inf / w` and `W = w`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlabWeights {
    /// `e^{-Phi}` per cell column.
    pub a: Vec<f64>,
    /// `e^{-Phi}` per space face (arithmetic mean of neighbours).
    pub a_face: Vec<f64>,
    pub w: Vec<f64>,
    pub rho: Vec<f64>,
    /// `d_x Phi` per cell column.
    pub dphi: Vec<f64>,
}

impl SlabWeights {
    pub fn new(slab: &Slab, w: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        let nx = slab.nx;
        if w.len() != nx || rho.len() != nx {
            return Err(HypoError::DimensionMismatch("slab weights".into()));
        }
        if w.iter().chain(&rho).any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(HypoError::InvalidModel("slab weights must be positive".into()));
        }
        let a: Vec<f64> = (0..nx).map(|i| rho[i] / w[i]).collect();
        let phi: Vec<f64> = a.iter().map(|v| -v.ln()).collect();
        let a_face = (0..slab.n_xfaces())
            .map(|f| match slab.x_face_cells(f) {
                Some((p, q)) => 0.5 * (a[p] + a[q]),
                None => a[if f == 0 { 0 } else { nx - 1 }],
            })
            .collect();
        let dx = slab.dx();
        let dphi = (0..nx)
            .map(|i| {
                if slab.periodic() {
                    (phi[(i + 1) % nx] - phi[(i + nx - 1) % nx]) / (2.0 * dx)
                } else if i == 0 {
                    (phi[1] - phi[0]) / dx
                } else if i + 1 == nx {
                    (phi[nx - 1] - phi[nx - 2]) / dx
                } else {
                    (phi[i + 1] - phi[i - 1]) / (2.0 * dx)
                }
            })
            .collect();
        Ok(Self { a, a_face, w, rho, dphi })
    }

    pub fn uniform(slab: &Slab) -> Self {
        Self::new(slab, vec![1.0; slab.nx], vec![1.0; slab.nx]).expect("uniform weights are valid")
    }

    pub fn from_state(slab: &Slab, state: &StationaryState) -> Result<Self> {
        Self::new(slab, state.w.values.clone(), state.density.values.clone())
    }

    fn rho_face(&self, slab: &Slab, f: usize) -> f64 {
        match slab.x_face_cells(f) {
            Some((p, q)) => 0.5 * (self.rho[p] + self.rho[q]),
            None => self.rho[if f == 0 { 0 } else { slab.nx - 1 }],
        }
    }

    fn w_face(&self, slab: &Slab, f: usize) -> f64 {
        match slab.x_face_cells(f) {
            Some((p, q)) => 0.5 * (self.w[p] + self.w[q]),
            None => self.w[if f == 0 { 0 } else { slab.nx - 1 }],
        }
    }
}

/// `K h = -vol div(e^{-Phi} grad h)` with zero flux through the time
/// boundary (and through walls).
fn poisson_apply(slab: &Slab, wt: &SlabWeights, h: &[f64], out: &mut [f64]) {
    let (nt, nx) = (slab.nt, slab.nx);
    let (ct, cx) = (slab.dx() / slab.tau(), slab.tau() / slab.dx());
    out.iter_mut().for_each(|v| *v = 0.0);
    for k in 1..nt {
        for i in 0..nx {
            let (p, q) = ((k - 1) * nx + i, k * nx + i);
            let flux = wt.a[i] * ct * (h[q] - h[p]);
            out[p] -= flux;
            out[q] += flux;
        }
    }
    for f in 0..slab.n_xfaces() {
        if let Some((ip, iq)) = slab.x_face_cells(f) {
            let c = wt.a_face[f] * cx;
            for k in 0..nt {
                let (p, q) = (k * nx + ip, k * nx + iq);
                let flux = c * (h[q] - h[p]);
                out[p] -= flux;
                out[q] += flux;
            }
        }
    }
}

fn subtract_mean(x: &mut [f64]) {
    let m = pairwise_sum(x) / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= m);
}

pub const POISSON_TOL: f64 = 1e-11;

#[derive(Debug, Clone)]
pub struct PoissonSolution {
    pub h: Vec<f64>,
    /// `e^{-Phi} grad h` on faces.
    pub flux: SpaceTimeVectorField,
    pub report: CgReport,
}

/// Solve `div(e^{-Phi} grad h) = g` with zero flux in time, normalized by
/// `sum h e^{-Phi} = 0`.
pub fn weighted_poisson_solve(g: &[f64], slab: &Slab, wt: &SlabWeights) -> Result<PoissonSolution> {
    let n = slab.len();
    if g.len() != n {
        return Err(HypoError::DimensionMismatch("source does not match slab".into()));
    }
    let total = pairwise_sum(g);
    let scale = pairwise_sum_by(n, |k| g[k].abs());
    if total.abs() > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(HypoError::CompatibilityViolation(total * slab.cell_volume()));
    }
    let vol = slab.cell_volume();
    let rhs: Vec<f64> = g.iter().map(|v| -vol * v).collect();
    let mut h = vec![0.0; n];
    let report = conjugate_gradient(|x, y| poisson_apply(slab, wt, x, y), subtract_mean, &rhs, &mut h, POISSON_TOL, 20 * n)?;
    let nx = slab.nx;
    let ca = pairwise_sum_by(n, |k| h[k] * wt.a[k % nx]) / pairwise_sum_by(n, |k| wt.a[k % nx]);
    h.iter_mut().for_each(|v| *v -= ca);
    let flux = potential_flux(slab, wt, &h);
    Ok(PoissonSolution { h, flux, report })
}

fn potential_flux(slab: &Slab, wt: &SlabWeights, h: &[f64]) -> SpaceTimeVectorField {
    let (nt, nx, nf) = (slab.nt, slab.nx, slab.n_xfaces());
    let mut f = SpaceTimeVectorField::zeros(*slab);
    for k in 1..nt {
        for i in 0..nx {
            f.f0[k * nx + i] = wt.a[i] * (h[k * nx + i] - h[(k - 1) * nx + i]) / slab.tau();
        }
    }
    for fi in 0..nf {
        if let Some((p, q)) = slab.x_face_cells(fi) {
            for k in 0..nt {
                f.f1[k * nf + fi] = wt.a_face[fi] * (h[k * nx + q] - h[k * nx + p]) / slab.dx();
            }
        }
    }
    f
}

/// Quintic smoothstep and its derivative on `[0, 1]`.
fn smoothstep(s: f64) -> (f64, f64) {
    let s = s.clamp(0.0, 1.0);
    (s * s * s * (10.0 - 15.0 * s + 6.0 * s * s), 30.0 * s * s * (s - 1.0) * (s - 1.0))
}

/// Bump `1 - S(|d| / r)` and its derivative in `d`.
fn bump(d: f64, r: f64) -> (f64, f64) {
    let s = d.abs() / r;
    if s >= 1.0 {
        return (0.0, 0.0);
    }
    let (v, dv) = smoothstep(s);
    (1.0 - v, -dv * d.signum() / r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Index of the spatial bump.
    pub xb: usize,
    pub t_center: f64,
    pub t_half: f64,
    /// Time cells `k0..k1`.
    pub k0: usize,
    pub k1: usize,
    /// Space cells, consecutive (wrapping when periodic).
    pub cells: Vec<usize>,
    pub diameter: f64,
    /// Target `(1 + |Phi'|^2)^{-1/2}` at the patch center.
    pub target: f64,
}

/// Tensor-product partition `theta = alpha(t) beta(x)`.
#[derive(Debug, Clone)]
pub struct PartitionOfUnity {
    pub slab: Slab,
    pub x_centers: Vec<f64>,
    pub x_halves: Vec<f64>,
    pub patches: Vec<Patch>,
    /// `(1 + |Phi'|^2)^{-1/2}` per cell column.
    pub target: Vec<f64>,
}

impl PartitionOfUnity {
    pub fn build(slab: &Slab, wt: &SlabWeights) -> Result<Self> {
        let (nx, dx) = (slab.nx, slab.dx());
        let target: Vec<f64> = wt.dphi.iter().map(|d| (1.0 + d * d).powf(-0.5)).collect();
        let s_min = 2.0 * dx.max(slab.tau());
        let s_max = if slab.periodic() { slab.lx / 4.0 } else { slab.lx / 2.0 };
        let cell_of = |x: f64| (((x - slab.x_min) / dx).floor().max(0.0) as usize).min(nx - 1);
        // Greedy spacings following the local target.
        let mut spacings = Vec::new();
        let mut c = slab.x_min;
        let end = slab.x_min + slab.lx;
        while c < end - 1e-12 * slab.lx {
            let mut s = (0.5 * target[cell_of(c)]).clamp(s_min, s_max);
            for _ in 0..4 {
                let reach = (4.0 * s / dx).ceil() as isize;
                let ci = cell_of(c) as isize;
                let local = (ci - reach..=ci + reach)
                    .filter_map(|j| {
                        if slab.periodic() {
                            Some(target[j.rem_euclid(nx as isize) as usize])
                        } else {
                            (0..nx as isize).contains(&j).then(|| target[j as usize])
                        }
                    })
                    .fold(f64::INFINITY, f64::min);
                s = (0.5 * local).clamp(s_min, s_max);
            }
            spacings.push(s);
            c += s;
        }
        if slab.periodic() && spacings.len() < 4 {
            spacings = vec![slab.lx / 4.0; 4];
        }
        let total: f64 = spacings.iter().sum();
        let scale = slab.lx / total;
        spacings.iter_mut().for_each(|s| *s *= scale);
        let nb = spacings.len();
        let mut x_centers = Vec::with_capacity(nb + 1);
        let mut acc = slab.x_min;
        for s in &spacings {
            x_centers.push(acc);
            acc += s;
        }
        let x_halves: Vec<f64> = if slab.periodic() {
            (0..nb).map(|b| 2.0 * spacings[b].max(spacings[(b + nb - 1) % nb])).collect()
        } else {
            x_centers.push(end);
            (0..=nb)
                .map(|b| {
                    let left = if b == 0 { 0.0 } else { spacings[b - 1] };
                    let right = if b == nb { 0.0 } else { spacings[b] };
                    2.0 * left.max(right)
                })
                .collect()
        };
        let tau = slab.tau();
        let mut patches = Vec::new();
        for (b, (&xc, &xh)) in x_centers.iter().zip(&x_halves).enumerate() {
            let tgt = target[cell_of(xc.min(end - 0.5 * dx))];
            let m = ((slab.t_len / xh).ceil() as usize).max(1);
            let th = slab.t_len / m as f64;
            let cells: Vec<usize> = (0..nx)
                .filter(|&i| {
                    let l = slab.x_sep(slab.x_face(i), xc).abs();
                    let r = slab.x_sep(slab.x_face(i) + dx, xc).abs();
                    l < xh || r < xh
                })
                .collect();
            let cells = order_cells(cells, nx, slab.periodic());
            for a in 0..=m {
                let tc = a as f64 * th;
                let k0 = (0..slab.nt).find(|&k| ((k + 1) as f64 * tau - tc).abs() < th || (k as f64 * tau - tc).abs() < th);
                let k1 = (0..slab.nt).rev().find(|&k| ((k + 1) as f64 * tau - tc).abs() < th || (k as f64 * tau - tc).abs() < th);
                let (Some(k0), Some(k1)) = (k0, k1) else { continue };
                let ext_t = ((tc + th).min(slab.t_len) - (tc - th).max(0.0)).max(0.0);
                let diameter = (ext_t * ext_t + 4.0 * xh * xh).sqrt();
                patches.push(Patch { xb: b, t_center: tc, t_half: th, k0, k1: k1 + 1, cells: cells.clone(), diameter, target: tgt });
            }
        }
        Ok(Self { slab: *slab, x_centers, x_halves, patches, target })
    }

    /// Normalized spatial weight of bump `b` at `x`, with derivative.
    fn beta(&self, b: usize, x: f64) -> (f64, f64) {
        let mut sum = 0.0;
        let mut dsum = 0.0;
        let mut own = (0.0, 0.0);
        for (c, (&xc, &xh)) in self.x_centers.iter().zip(&self.x_halves).enumerate() {
            let v = bump(self.slab.x_sep(x, xc), xh);
            sum += v.0;
            dsum += v.1;
            if c == b {
                own = v;
            }
        }
        (own.0 / sum, (own.1 * sum - own.0 * dsum) / (sum * sum))
    }

    /// `theta_p(t, x)` and its gradient.
    pub fn theta(&self, p: usize, t: f64, x: f64) -> (f64, [f64; 2]) {
        let pa = &self.patches[p];
        let (al, dal) = bump(t - pa.t_center, pa.t_half);
        if al == 0.0 && dal == 0.0 {
            return (0.0, [0.0, 0.0]);
        }
        let (be, dbe) = self.beta(pa.xb, x);
        (al * be, [dal * be, al * dbe])
    }

    /// Largest `|sum_p theta_p - 1|` over cell centers.
    pub fn sum_defect(&self) -> f64 {
        let s = self.slab;
        let mut worst = 0.0f64;
        for k in 0..s.nt {
            for i in 0..s.nx {
                let total: f64 = (0..self.patches.len()).map(|p| self.theta(p, s.t(k), s.x(i)).0).sum();
                worst = worst.max((total - 1.0).abs());
            }
        }
        worst
    }

    /// Largest `|grad theta_p| / (1 + |Phi'|^2)^{1/2}` over cell centers and patches.
    pub fn gradient_ratio(&self) -> f64 {
        let s = self.slab;
        let mut worst = 0.0f64;
        for p in 0..self.patches.len() {
            for k in 0..s.nt {
                for i in 0..s.nx {
                    let (_, g) = self.theta(p, s.t(k), s.x(i));
                    worst = worst.max((g[0] * g[0] + g[1] * g[1]).sqrt() * self.target[i]);
                }
            }
        }
        worst
    }

    /// Extremes of `diameter / target` over patches.
    pub fn diameter_ratio_range(&self) -> (f64, f64) {
        self.patches.iter().map(|p| p.diameter / p.target).fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(r), hi.max(r)))
    }
}

/// Order a set of cells so that consecutive entries are neighbours.
fn order_cells(mut cells: Vec<usize>, nx: usize, periodic: bool) -> Vec<usize> {
    cells.sort_unstable();
    if periodic && cells.len() < nx {
        if let Some(gap) = (0..cells.len()).find(|&j| cells[(j + 1) % cells.len()] != (cells[j] + 1) % nx) {
            let len = cells.len();
            cells.rotate_left((gap + 1) % len);
        }
    }
    cells
}

/// Minimal-gradient solution of `div F = g_p` on a patch with `F = 0` on its boundary.
struct LocalProblem {
    nt: usize,
    nx: usize,
    tau: f64,
    dx: f64,
    h0: BandedCholesky,
    h1: BandedCholesky,
}

impl LocalProblem {
    fn new(slab: &Slab, p: &Patch, id: usize) -> Result<Self> {
        let nt = p.k1 - p.k0;
        let nx = p.cells.len();
        if nt < 3 || nx < 3 {
            return Err(HypoError::PatchSingular(id));
        }
        let (tau, dx) = (slab.tau(), slab.dx());
        let (ct, cx) = (dx / tau, tau / dx);
        let ghost_t = [p.k0 > 0, p.k1 < slab.nt];
        let wall = |i: usize, left: bool| !slab.periodic() && ((left && i == 0) || (!left && i + 1 == slab.nx));
        let ghost_x = [!wall(p.cells[0], true), !wall(p.cells[nx - 1], false)];
        // F0 unknowns: rows 1..nt-1, columns 0..nx-1.
        let h0 = BandedCholesky::factor((nt - 1) * nx, nx, |r, c| {
            let (ra, ca) = (r / nx, r % nx);
            if r == c {
                let mut d = 2.0 * ct;
                d += if ca > 0 || ghost_x[0] { cx } else { 0.0 };
                d += if ca + 1 < nx || ghost_x[1] { cx } else { 0.0 };
                d
            } else {
                let (rb, cb) = (c / nx, c % nx);
                if ra == rb && ca.abs_diff(cb) == 1 {
                    -cx
                } else if ca == cb && ra.abs_diff(rb) == 1 {
                    -ct
                } else {
                    0.0
                }
            }
        })?;
        // F1 unknowns: rows 0..nt-1, interior faces 1..nx-1.
        let m = nx - 1;
        let h1 = BandedCholesky::factor(nt * m, m, |r, c| {
            let (ra, ca) = (r / m, r % m);
            if r == c {
                let mut d = 2.0 * cx;
                // Half-cell distance to the vanishing value at the slab ends.
                d += if ra > 0 || ghost_t[0] { ct } else { 2.0 * ct };
                d += if ra + 1 < nt || ghost_t[1] { ct } else { 2.0 * ct };
                d
            } else {
                let (rb, cb) = (c / m, c % m);
                if ra == rb && ca.abs_diff(cb) == 1 {
                    -cx
                } else if ca == cb && ra.abs_diff(rb) == 1 {
                    -ct
                } else {
                    0.0
                }
            }
        })?;
        Ok(Self { nt, nx, tau, dx, h0, h1 })
    }

    /// `B^T lambda` split into the two face blocks.
    fn grad(&self, lam: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (nt, nx) = (self.nt, self.nx);
        let m = nx - 1;
        let mut u0 = vec![0.0; (nt - 1) * nx];
        for r in 1..nt {
            for c in 0..nx {
                u0[(r - 1) * nx + c] = (lam[(r - 1) * nx + c] - lam[r * nx + c]) / self.tau;
            }
        }
        let mut u1 = vec![0.0; nt * m];
        for r in 0..nt {
            for c in 1..nx {
                u1[r * m + c - 1] = (lam[r * nx + c - 1] - lam[r * nx + c]) / self.dx;
            }
        }
        (u0, u1)
    }

    /// Cell divergence of the local face fields.
    fn div(&self, u0: &[f64], u1: &[f64]) -> Vec<f64> {
        let (nt, nx) = (self.nt, self.nx);
        let m = nx - 1;
        let mut out = vec![0.0; nt * nx];
        for r in 0..nt {
            for c in 0..nx {
                let lo = if r > 0 { u0[(r - 1) * nx + c] } else { 0.0 };
                let hi = if r + 1 < nt { u0[r * nx + c] } else { 0.0 };
                let l = if c > 0 { u1[r * m + c - 1] } else { 0.0 };
                let rr = if c + 1 < nx { u1[r * m + c] } else { 0.0 };
                out[r * nx + c] = (hi - lo) / self.tau + (rr - l) / self.dx;
            }
        }
        out
    }

    fn solve_faces(&self, lam: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (mut u0, mut u1) = self.grad(lam);
        self.h0.solve_in_place(&mut u0);
        self.h1.solve_in_place(&mut u1);
        (u0, u1)
    }

    fn solve(&self, g: &[f64]) -> Result<(Vec<f64>, Vec<f64>, CgReport)> {
        let n = g.len();
        let mut lam = vec![0.0; n];
        let report = conjugate_gradient(
            |x, y| {
                let (u0, u1) = self.solve_faces(x);
                y.copy_from_slice(&self.div(&u0, &u1));
            },
            subtract_mean,
            g,
            &mut lam,
            1e-13,
            50 * n,
        )?;
        let (u0, u1) = self.solve_faces(&lam);
        Ok((u0, u1, report))
    }
}

/// Measured constants of one solve.
#[derive(Debug, Clone)]
pub struct BogovskiiReport {
    pub field: SpaceTimeVectorField,
    /// `lhs / rhs` of the weighted bound, `None` when `g = 0`.
    pub lambda2: Option<f64>,
    pub mass_term: f64,
    pub gradient_term: f64,
    pub source_norm_sq: f64,
    pub divergence_residual: f64,
    pub boundary_max: f64,
    pub max_patch_mean: f64,
    pub poisson_iterations: usize,
    pub patch_count: usize,
    /// Constant of `int |F|^2 e^Phi <= C int g^2 e^Phi / W`.
    pub c_b_mass: Option<f64>,
    /// Constant of the gradient bound carrying `(1 + |Phi'|^2)^{-1}`.
    pub c_b_gradient: Option<f64>,
    pub ledger: Vec<LedgerLine>,
}

/// Norm terms of a field against the slab weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldNorms {
    /// `sum |F|^2 w / rho`.
    pub mass: f64,
    /// `sum |grad F|^2 / rho`.
    pub gradient: f64,
    /// `sum |F|^2 e^Phi` with `e^Phi = w / rho`.
    pub mass_phi: f64,
    /// `sum |grad F|^2 e^Phi / (1 + |Phi'|^2)`.
    pub gradient_phi: f64,
}

pub fn field_norms(f: &SpaceTimeVectorField, wt: &SlabWeights) -> FieldNorms {
    let s = f.slab;
    let (nt, nx, nf) = (s.nt, s.nx, s.n_xfaces());
    let vol = s.cell_volume();
    let (ct, cx) = (s.dx() / s.tau(), s.tau() / s.dx());
    let mut out = FieldNorms { mass: 0.0, gradient: 0.0, mass_phi: 0.0, gradient_phi: 0.0 };
    let damp = |i: usize| 1.0 / (1.0 + wt.dphi[i] * wt.dphi[i]);
    let damp_face = |f: usize| match s.x_face_cells(f) {
        Some((p, q)) => 0.5 * (damp(p) + damp(q)),
        None => damp(if f == 0 { 0 } else { nx - 1 }),
    };
    let mut mass = Vec::new();
    let mut grad = Vec::new();
    let mut grad_phi = Vec::new();
    for k in 1..nt {
        for i in 0..nx {
            let v = f.f0[k * nx + i];
            mass.push(v * v * vol * wt.w[i] / wt.rho[i]);
        }
    }
    for k in 0..nt {
        for fi in 0..nf {
            let v = f.f1[k * nf + fi];
            mass.push(v * v * vol * wt.w_face(&s, fi) / wt.rho_face(&s, fi));
        }
    }
    let mut push_grad = |d: f64, rho: f64, w: f64, dmp: f64| {
        grad.push(d / rho);
        grad_phi.push(d * w / rho * dmp);
    };
    for k in 0..nt {
        for i in 0..nx {
            let d = f.f0[(k + 1) * nx + i] - f.f0[k * nx + i];
            push_grad(d * d * ct, wt.rho[i], wt.w[i], damp(i));
            let e = f.f1[k * nf + s.right_face(i)] - f.f1[k * nf + i];
            push_grad(e * e * cx, wt.rho[i], wt.w[i], damp(i));
        }
    }
    for fi in 0..nf {
        let (rf, wf, df) = (wt.rho_face(&s, fi), wt.w_face(&s, fi), damp_face(fi));
        if let Some((p, q)) = s.x_face_cells(fi) {
            for k in 1..nt {
                let d = f.f0[k * nx + q] - f.f0[k * nx + p];
                push_grad(d * d * cx, rf, wf, df);
            }
        } else {
            // Wall faces: F0 against the zero extension is not part of the slab.
        }
        for k in 0..nt.saturating_sub(1) {
            let d = f.f1[(k + 1) * nf + fi] - f.f1[k * nf + fi];
            push_grad(d * d * ct, rf, wf, df);
        }
        for k in [0, nt - 1] {
            let d = f.f1[k * nf + fi];
            push_grad(2.0 * d * d * ct, rf, wf, df);
        }
    }
    out.mass = pairwise_sum(&mass);
    out.mass_phi = out.mass;
    out.gradient = pairwise_sum(&grad);
    out.gradient_phi = pairwise_sum(&grad_phi);
    out
}

/// `sum g^2 weight / rho` over the slab.
pub fn source_norm_sq(g: &[f64], slab: &Slab, wt: &SlabWeights, weak_ell: Option<f64>) -> f64 {
    let nx = slab.nx;
    let vol = slab.cell_volume();
    pairwise_sum_by(g.len(), |k| {
        let i = k % nx;
        let extra = weak_ell.map_or(1.0, |l| (1.0 + slab.x(i).powi(2)).powf(l));
        g[k] * g[k] * extra / wt.rho[i] * vol
    })
}

/// Solve `div F = g`, `F = 0` at `t in {0, T}`, and measure the weighted
/// bound. `weak_ell` switches the source weight to `(1 + x^2)^ell`.
pub fn bogovskii_solve(g: &[f64], slab: &Slab, wt: &SlabWeights, weak_ell: Option<f64>) -> Result<BogovskiiReport> {
    let n = slab.len();
    if g.len() != n {
        return Err(HypoError::DimensionMismatch("source does not match slab".into()));
    }
    let (nx, nf) = (slab.nx, slab.n_xfaces());
    let pot = weighted_poisson_solve(g, slab, wt)?;
    let pou = PartitionOfUnity::build(slab, wt)?;
    let (tau, dx) = (slab.tau(), slab.dx());
    let locals: Vec<(SpaceTimeVectorField, f64)> = (0..pou.patches.len())
        .into_par_iter()
        .map(|id| {
            let p = &pou.patches[id];
            let (pt, px) = (p.k1 - p.k0, p.cells.len());
            // theta * flux on every face of the patch, including its boundary.
            let th0 = |r: usize, c: usize| {
                let (k, i) = (p.k0 + r, p.cells[c]);
                pou.theta(id, k as f64 * tau, slab.x(i)).0 * pot.flux.f0[k * nx + i]
            };
            let face_of = |c: usize| if c < px { p.cells[c] } else { slab.right_face(p.cells[px - 1]) };
            let th1 = |r: usize, c: usize| {
                let (k, f) = (p.k0 + r, face_of(c));
                let xf = if c < px { slab.x_face(p.cells[c]) } else { slab.x_face(p.cells[px - 1]) + dx };
                pou.theta(id, slab.t(k), xf).0 * pot.flux.f1[k * nf + f]
            };
            let mut gp = vec![0.0; pt * px];
            for r in 0..pt {
                for c in 0..px {
                    gp[r * px + c] = (th0(r + 1, c) - th0(r, c)) / tau + (th1(r, c + 1) - th1(r, c)) / dx;
                }
            }
            let mean = pairwise_sum(&gp);
            let scale = pairwise_sum_by(gp.len(), |k| gp[k].abs()).max(f64::MIN_POSITIVE);
            let mut out = SpaceTimeVectorField::zeros(*slab);
            if scale <= f64::MIN_POSITIVE {
                return Ok((out, 0.0));
            }
            let lp = LocalProblem::new(slab, p, id)?;
            let (u0, u1, _) = lp.solve(&gp)?;
            for r in 1..pt {
                for c in 0..px {
                    out.f0[(p.k0 + r) * nx + p.cells[c]] = u0[(r - 1) * px + c];
                }
            }
            for r in 0..pt {
                for c in 1..px {
                    out.f1[(p.k0 + r) * nf + p.cells[c]] = u1[r * (px - 1) + c - 1];
                }
            }
            Ok((out, (mean / scale).abs()))
        })
        .collect::<Result<_>>()?;
    let mut field = SpaceTimeVectorField::zeros(*slab);
    let mut max_patch_mean = 0.0f64;
    for (l, m) in &locals {
        field.axpy(1.0, l);
        max_patch_mean = max_patch_mean.max(*m);
    }
    let div = field.divergence();
    let gnorm = dot(g, g).sqrt();
    let rnorm = pairwise_sum_by(n, |k| (div[k] - g[k]).powi(2)).sqrt();
    let divergence_residual = if gnorm > 0.0 { rnorm / gnorm } else { rnorm };
    let norms = field_norms(&field, wt);
    let src = source_norm_sq(g, slab, wt, weak_ell);
    let lambda2 = (src > 0.0).then(|| (norms.mass + norms.gradient) / src);
    // Weighted bounds with e^Phi = w / rho and W = w.
    let vol = slab.cell_volume();
    let g_phi_over_w = pairwise_sum_by(n, |k| g[k] * g[k] / wt.rho[k % nx] * vol);
    let g_grad = pairwise_sum_by(n, |k| {
        let i = k % nx;
        g[k] * g[k] * (1.0 / wt.w[i] + 1.0 / (1.0 + wt.dphi[i] * wt.dphi[i])) * wt.w[i] / wt.rho[i] * vol
    });
    let c_b_mass = (g_phi_over_w > 0.0).then(|| norms.mass_phi / g_phi_over_w);
    let c_b_gradient = (g_grad > 0.0).then(|| norms.gradient_phi / g_grad);
    // Potential step: int |e^{-Phi} grad h|^2 e^Phi = -sum vol g h, bounded through C_P.
    let pot_energy = -pairwise_sum_by(n, |k| vol * g[k] * pot.h[k]);
    let mut ledger = vec![
        LedgerLine::eq("potential energy identity", pot_energy, flux_energy(&pot.flux, wt)),
        LedgerLine::le("time boundary values vanish", field.boundary_max(), 0.0),
    ];
    if let (Some(cm), Some(cg)) = (c_b_mass, c_b_gradient) {
        ledger.push(LedgerLine::le("lemma mass bound", norms.mass_phi, cm * g_phi_over_w));
        ledger.push(LedgerLine::le("lemma gradient bound", norms.gradient_phi, cg * g_grad));
    }
    Ok(BogovskiiReport {
        field: field.clone(),
        lambda2,
        mass_term: norms.mass,
        gradient_term: norms.gradient,
        source_norm_sq: src,
        divergence_residual,
        boundary_max: field.boundary_max(),
        max_patch_mean,
        poisson_iterations: pot.report.iterations,
        patch_count: pou.patches.len(),
        c_b_mass,
        c_b_gradient,
        ledger,
    })
}

/// `sum F^2 / a` over faces with the face measure, for a potential flux.
fn flux_energy(f: &SpaceTimeVectorField, wt: &SlabWeights) -> f64 {
    let s = f.slab;
    let (nt, nx, nf) = (s.nt, s.nx, s.n_xfaces());
    let vol = s.cell_volume();
    let mut parts = Vec::new();
    for k in 1..nt {
        for i in 0..nx {
            parts.push(f.f0[k * nx + i].powi(2) / wt.a[i] * vol);
        }
    }
    for fi in 0..nf {
        if s.x_face_cells(fi).is_some() {
            for k in 0..nt {
                parts.push(f.f1[k * nf + fi].powi(2) / wt.a_face[fi] * vol);
            }
        }
    }
    pairwise_sum(&parts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoincareResult {
    pub c_p: f64,
    pub iterations: usize,
}

/// Largest ratio `sum h^2 W e^{-Phi} / sum |grad h|^2 e^{-Phi}` over `h` with
/// `sum h e^{-Phi} = 0`, by inverse iteration.
pub fn poincare_constant(slab: &Slab, wt: &SlabWeights, big_w: &[f64]) -> Result<PoincareResult> {
    let (n, nx) = (slab.len(), slab.nx);
    if big_w.len() != nx || big_w.iter().any(|&v| !(v > 0.0)) {
        return Err(HypoError::SpectralFailure("Poincare weight must be positive per column".into()));
    }
    let vol = slab.cell_volume();
    let b: Vec<f64> = (0..n).map(|k| big_w[k % nx] * wt.a[k % nx] * vol).collect();
    let c: Vec<f64> = (0..n).map(|k| wt.a[k % nx] * vol).collect();
    let csum = pairwise_sum(&c);
    let constrain = |h: &mut [f64]| {
        let m = dot(&c, h) / csum;
        h.iter_mut().for_each(|v| *v -= m);
    };
    // Start from a smooth mode mixing both directions.
    let mut h: Vec<f64> = (0..n)
        .map(|k| {
            let (kk, i) = (k / nx, k % nx);
            (std::f64::consts::PI * slab.t(kk) / slab.t_len).cos() + 0.5 * (2.0 * std::f64::consts::PI * (slab.x(i) - slab.x_min) / slab.lx).sin() + 0.01 * ((k * 7919) % 13) as f64
        })
        .collect();
    constrain(&mut h);
    let mut kh = vec![0.0; n];
    let mut prev = 0.0;
    for it in 1..=200 {
        let bh: Vec<f64> = (0..n).map(|k| b[k] * h[k]).collect();
        let s = pairwise_sum(&bh) / csum;
        let rhs: Vec<f64> = (0..n).map(|k| bh[k] - s * c[k]).collect();
        let mut y = h.clone();
        conjugate_gradient(|x, o| poisson_apply(slab, wt, x, o), subtract_mean, &rhs, &mut y, 1e-12, 20 * n)?;
        constrain(&mut y);
        poisson_apply(slab, wt, &y, &mut kh);
        let num = pairwise_sum_by(n, |k| b[k] * y[k] * y[k]);
        let den = dot(&y, &kh);
        if !(den > 0.0) {
            return Err(HypoError::SpectralFailure("Poincare iteration hit the kernel".into()));
        }
        let q = num / den;
        let nrm = num.sqrt();
        h = y.iter().map(|v| v / nrm).collect();
        if it > 3 && (q - prev).abs() <= 1e-10 * q {
            return Ok(PoincareResult { c_p: q, iterations: it });
        }
        prev = q;
    }
    Err(HypoError::NoConvergence { method: "Poincare inverse iteration", iterations: 200, residual: prev })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn slab(n: usize) -> Slab {
        Slab::new(n, 1.0, n, 0.0, 1.0, XBoundary::Periodic).unwrap()
    }

    fn mode(s: &Slab) -> Vec<f64> {
        (0..s.len())
            .map(|k| {
                let (kk, i) = (k / s.nx, k % s.nx);
                (2.0 * PI * s.x(i)).sin() * (1.0 + 0.5 * (PI * s.t(kk)).cos())
            })
            .collect()
    }

    fn varying(s: &Slab) -> SlabWeights {
        let phase = |i: usize| 2.0 * PI * (s.x(i) - s.x_min) / s.lx;
        let w: Vec<f64> = (0..s.nx).map(|i| 1.0 + 0.8 * phase(i).cos().powi(2)).collect();
        let rho: Vec<f64> = (0..s.nx).map(|i| 1.0 + 0.3 * phase(i).sin()).collect();
        SlabWeights::new(s, w, rho).unwrap()
    }

    #[test]
    fn poisson_fourier_mode() {
        let s = slab(32);
        let wt = SlabWeights::uniform(&s);
        let g: Vec<f64> = (0..s.len()).map(|k| (2.0 * PI * s.x(k % s.nx)).sin()).collect();
        let sol = weighted_poisson_solve(&g, &s, &wt).unwrap();
        let dx = s.dx();
        let sym = (2.0 - 2.0 * (2.0 * PI * dx).cos()) / (dx * dx);
        for k in 0..s.len() {
            assert!((sol.h[k] + g[k] / sym).abs() < 1e-8, "{k}");
        }
        let div = sol.flux.divergence();
        let err = (0..s.len()).map(|k| (div[k] - g[k]).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8);
        assert_eq!(weighted_poisson_solve(&vec![0.0; s.len()], &s, &wt).unwrap().h, vec![0.0; s.len()]);
    }

    #[test]
    fn poisson_rejects_incompatible_source() {
        let s = slab(8);
        let wt = SlabWeights::uniform(&s);
        assert!(matches!(weighted_poisson_solve(&vec![1.0; s.len()], &s, &wt), Err(HypoError::CompatibilityViolation(_))));
    }

    #[test]
    fn partition_properties() {
        for s in [slab(48), Slab::new(40, 2.0, 64, -4.0, 8.0, XBoundary::Specular).unwrap()] {
            let wt = varying(&s);
            let pou = PartitionOfUnity::build(&s, &wt).unwrap();
            assert!(pou.sum_defect() < 1e-12);
            assert!(pou.gradient_ratio() <= 8.0, "{}", pou.gradient_ratio());
            let (lo, hi) = pou.diameter_ratio_range();
            assert!(lo >= 0.25 && hi <= 4.0, "{lo} {hi}");
            for p in 0..pou.patches.len() {
                for k in 0..s.nt {
                    for i in 0..s.nx {
                        assert!(pou.theta(p, s.t(k), s.x(i)).0 >= 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn solves_divergence_with_zero_time_boundary() {
        for s in [slab(32), Slab::new(24, 1.0, 32, -2.0, 4.0, XBoundary::Specular).unwrap()] {
            let wt = varying(&s);
            let mut g = mode(&s);
            for k in 0..s.len() {
                g[k] += 0.3 * ((k * 37 % 11) as f64 - 5.0) / 5.0;
            }
            let m = pairwise_sum(&g) / g.len() as f64;
            g.iter_mut().for_each(|v| *v -= m);
            let r = bogovskii_solve(&g, &s, &wt, None).unwrap();
            assert!(r.divergence_residual <= 1e-8, "{}", r.divergence_residual);
            assert_eq!(r.boundary_max, 0.0);
            assert!(r.max_patch_mean < 1e-10);
            assert!(r.lambda2.unwrap().is_finite());
            assert!(r.ledger.iter().all(|l| l.holds()), "{:?}", r.ledger);
        }
    }

    #[test]
    fn zero_source_has_no_ratio() {
        let s = slab(16);
        let r = bogovskii_solve(&vec![0.0; s.len()], &s, &SlabWeights::uniform(&s), None).unwrap();
        assert!(r.lambda2.is_none());
        assert!(r.field.f0.iter().chain(&r.field.f1).all(|&v| v == 0.0));
    }

    #[test]
    fn lambda2_stable_for_uniform_weights() {
        let vals: Vec<f64> = [32usize, 64]
            .iter()
            .map(|&n| {
                let s = slab(n);
                bogovskii_solve(&mode(&s), &s, &SlabWeights::uniform(&s), None).unwrap().lambda2.unwrap()
            })
            .collect();
        assert!((vals[0] / vals[1] - 1.0).abs() < 0.2, "{vals:?}");
    }

    #[test]
    fn poincare_closed_form_and_scaling() {
        let s = slab(128);
        let wt = SlabWeights::uniform(&s);
        let cp = poincare_constant(&s, &wt, &vec![1.0; s.nx]).unwrap().c_p;
        let exact = (1.0 / (PI * PI)).max(1.0 / (4.0 * PI * PI));
        assert!((cp / exact - 1.0).abs() < 0.01, "{cp} vs {exact}");
        let doubled = poincare_constant(&s, &wt, &vec![2.0; s.nx]).unwrap().c_p;
        assert!((doubled / cp - 2.0).abs() < 1e-8, "{doubled} {cp}");
    }

    #[test]
    fn potential_bound_through_poincare() {
        let s = slab(24);
        let wt = varying(&s);
        let g = mode(&s);
        let sol = weighted_poisson_solve(&g, &s, &wt).unwrap();
        let cp = poincare_constant(&s, &wt, &wt.w).unwrap().c_p;
        let energy = flux_energy(&sol.flux, &wt);
        let rhs = cp * pairwise_sum_by(s.len(), |k| g[k] * g[k] / wt.rho[k % s.nx] * s.cell_volume());
        assert!(energy <= rhs * (1.0 + 1e-9), "{energy} vs {rhs}");
    }
}
