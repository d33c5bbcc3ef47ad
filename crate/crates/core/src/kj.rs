//! Moment representation of the density gradient: fields `K_i`, `J_ij`
//! with `d_i(rho / rho_inf) = K_i + sum_j d_j J_ij`, index 0 being time.

use crate::coercivity::TestFunctions;
use crate::error::{HypoError, Result};
use crate::evolution::Trajectory;
use crate::grid::{trapezoid, Grid, PhaseField};
use crate::models::{coll_into, coll_transpose_into, ratio, CollisionKind, KineticModel};
use crate::numerics::pairwise_sum_by;
use crate::steady::{dx_centered, StationaryState};

/// How the two collision contributions to `K` are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CollisionTermForm {
    /// Flux forms for FP, mean and jump forms for BGK.
    #[default]
    Specialized,
    /// Direct application of `L` and `L*`.
    Generic,
}

/// `K`, `J` and `rho / rho_inf` at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct KJSlice {
    pub u: Vec<f64>,
    pub k: [Vec<f64>; 2],
    pub j: [[Vec<f64>; 2]; 2],
    /// The four summands of `K`, for diagnostics.
    pub k_terms: [[Vec<f64>; 2]; 4],
}

/// Space-time fields, row-major in `(n, i)`.
#[derive(Debug, Clone)]
pub struct KJFields {
    pub grid: Grid,
    /// Time between consecutive rows.
    pub dt: f64,
    pub nt: usize,
    pub u: Vec<f64>,
    pub k: [Vec<f64>; 2],
    pub j: [[Vec<f64>; 2]; 2],
}

impl KJFields {
    pub fn new(grid: Grid, dt: f64) -> Self {
        Self { grid, dt, nt: 0, u: Vec::new(), k: Default::default(), j: Default::default() }
    }

    pub fn push(&mut self, s: &KJSlice) {
        self.u.extend_from_slice(&s.u);
        for a in 0..2 {
            self.k[a].extend_from_slice(&s.k[a]);
            for b in 0..2 {
                self.j[a][b].extend_from_slice(&s.j[a][b]);
            }
        }
        self.nt += 1;
    }

    pub fn is_finite(&self) -> bool {
        let all = |v: &Vec<f64>| v.iter().all(|x| x.is_finite());
        all(&self.u) && self.k.iter().all(all) && self.j.iter().flatten().all(all)
    }
}

/// Precomputed per-model data for slicing fields.
pub struct KJContext<'a> {
    model: &'a KineticModel,
    state: &'a StationaryState,
    tf: &'a TestFunctions,
    form: CollisionTermForm,
    /// `L f_inf / f_inf`.
    lw: Vec<f64>,
    /// `d_x (psi_a / rho_inf)`.
    dx_psi: [Vec<f64>; 2],
    /// `d_v (M d_v psi_a)` for the FP flux form.
    m_flux_psi: [Vec<f64>; 2],
    /// `d_v psi_a` at interior v-faces, `j + 1/2` stored at `j`.
    dpsi_face: [Vec<f64>; 2],
}

impl<'a> KJContext<'a> {
    pub fn new(model: &'a KineticModel, state: &'a StationaryState, tf: &'a TestFunctions, form: CollisionTermForm) -> Result<Self> {
        let g = model.grid;
        if !g.same_shape(&tf.grid) || !g.same_shape(&state.f_inf.grid) {
            return Err(HypoError::DimensionMismatch("test functions, state and model grids differ".into()));
        }
        let (nx, nv, dv) = (g.nx, g.nv, g.dv());
        let n = g.len();
        let mut lf = vec![0.0; n];
        coll_into(model, &state.f_inf.values, &mut lf);
        let lw = ratio(&PhaseField::from_values(g, lf)?, &state.f_inf)?;
        let mut dx_psi = [vec![0.0; n], vec![0.0; n]];
        let mut m_flux_psi = [vec![0.0; n], vec![0.0; n]];
        let mut dpsi_face = [vec![0.0; n], vec![0.0; n]];
        for a in 0..2 {
            for j in 0..nv {
                let line: Vec<f64> = (0..nx).map(|i| tf.psi[a].at(i, j) / state.density.values[i]).collect();
                for (i, d) in dx_centered(&line, &g).into_iter().enumerate() {
                    dx_psi[a][g.idx(i, j)] = d;
                }
            }
            for i in 0..nx {
                let m = model.m.column(i);
                for j in 0..nv {
                    let dm = if j == 0 {
                        (m[1] - m[0]) / dv
                    } else if j + 1 == nv {
                        (m[nv - 1] - m[nv - 2]) / dv
                    } else {
                        (m[j + 1] - m[j - 1]) / (2.0 * dv)
                    };
                    let k = g.idx(i, j);
                    m_flux_psi[a][k] = dm * tf.dpsi[a].values[k] + m[j] * tf.d2psi[a].values[k];
                    if j + 1 < nv {
                        dpsi_face[a][k] = 0.5 * (tf.dpsi[a].values[k] + tf.dpsi[a].values[k + 1]);
                    }
                }
            }
        }
        Ok(Self { model, state, tf, form, lw, dx_psi, m_flux_psi, dpsi_face })
    }

    pub fn slice(&self, f: &PhaseField) -> Result<KJSlice> {
        let g = self.model.grid;
        if !f.grid.same_shape(&g) {
            return Err(HypoError::DimensionMismatch("field grid differs from model grid".into()));
        }
        let (nx, nv, dv) = (g.nx, g.nv, g.dv());
        let w = &self.state.f_inf;
        let rho_inf = &self.state.density.values;
        let mut h = vec![0.0; g.len()];
        let mut u = vec![0.0; nx];
        for i in 0..nx {
            let col = f.column(i);
            let rho = pairwise_sum_by(nv, |j| col[j]) * dv;
            u[i] = rho / rho_inf[i];
            let wc = w.column(i);
            for j in 0..nv {
                h[i * nv + j] = u[i] * wc[j] - col[j];
            }
        }
        // Pointwise collision integrands; the FP flux forms are integrated directly below.
        let pointwise = match (self.form, self.model.kind) {
            (CollisionTermForm::Generic, _) => Some((self.generic_third(&h)?, self.generic_fourth(f)?)),
            (CollisionTermForm::Specialized, CollisionKind::Bgk) => Some((self.bgk_third(&h), self.bgk_fourth(&f.values))),
            (CollisionTermForm::Specialized, CollisionKind::Fp) => None,
        };
        let mut k_terms: [[Vec<f64>; 2]; 4] = Default::default();
        let mut j: [[Vec<f64>; 2]; 2] = Default::default();
        for a in 0..2 {
            let psi = &self.tf.psi[a].values;
            let dpsi = &self.tf.dpsi[a].values;
            let q = |i: usize, term: &dyn Fn(usize, usize) -> f64| pairwise_sum_by(nv, |jj| term(i, jj)) * dv;
            j[a][0] = (0..nx).map(|i| q(i, &|i, jj| h[i * nv + jj] * psi[i * nv + jj]) / rho_inf[i]).collect();
            j[a][1] = (0..nx).map(|i| q(i, &|i, jj| h[i * nv + jj] * g.v(jj) * psi[i * nv + jj]) / rho_inf[i]).collect();
            k_terms[0][a] = (0..nx).map(|i| -q(i, &|i, jj| h[i * nv + jj] * g.v(jj) * self.dx_psi[a][i * nv + jj])).collect();
            k_terms[1][a] = (0..nx)
                .map(|i| -q(i, &|i, jj| h[i * nv + jj] * self.model.g.at(i, jj) * dpsi[i * nv + jj]) / rho_inf[i])
                .collect();
            match &pointwise {
                Some((c3, c4)) => {
                    k_terms[2][a] = (0..nx).map(|i| q(i, &|i, jj| c3[i * nv + jj] * psi[i * nv + jj]) / rho_inf[i]).collect();
                    k_terms[3][a] = (0..nx).map(|i| q(i, &|i, jj| c4[i * nv + jj] * psi[i * nv + jj]) / rho_inf[i]).collect();
                }
                None => {
                    k_terms[2][a] = self.fp_integrated(&h, a, true);
                    k_terms[3][a] = self.fp_integrated(&f.values, a, false);
                }
            }
        }
        let k = [0, 1].map(|a| (0..nx).map(|i| (0..4).map(|t| k_terms[t][a][i]).sum()).collect());
        Ok(KJSlice { u, k, j, k_terms })
    }

    /// `-1/2 (lw h + L h - L* h)`.
    fn generic_third(&self, h: &[f64]) -> Result<Vec<f64>> {
        let n = h.len();
        let mut lh = vec![0.0; n];
        coll_into(self.model, h, &mut lh);
        let lsh = self.adjoint(h)?;
        Ok((0..n).map(|k| -0.5 * (self.lw[k] * h[k] + lh[k] - lsh[k])).collect())
    }

    /// `1/2 (-lw f + L f + L* f)`.
    fn generic_fourth(&self, f: &PhaseField) -> Result<Vec<f64>> {
        let n = f.values.len();
        let mut lf = vec![0.0; n];
        coll_into(self.model, &f.values, &mut lf);
        let lsf = self.adjoint(&f.values)?;
        Ok((0..n).map(|k| 0.5 * (-self.lw[k] * f.values[k] + lf[k] + lsf[k])).collect())
    }

    fn adjoint(&self, x: &[f64]) -> Result<Vec<f64>> {
        let g = self.model.grid;
        let p = ratio(&PhaseField::from_values(g, x.to_vec())?, &self.state.f_inf)?;
        let mut out = vec![0.0; x.len()];
        coll_transpose_into(self.model, &p, &mut out);
        for (o, w) in out.iter_mut().zip(&self.state.f_inf.values) {
            *o *= w;
        }
        Ok(out)
    }

    /// FP third term (`third = true`, applied to `h`) or fourth term (applied to `f`):
    /// `-int d_v(x / f_inf) f_inf d_v psi / rho_inf`, plus for the third term
    /// `-int (h / M) d_v(M d_v psi) / rho_inf`.
    fn fp_integrated(&self, x: &[f64], a: usize, third: bool) -> Vec<f64> {
        let g = self.model.grid;
        let (nx, nv, dv) = (g.nx, g.nv, g.dv());
        (0..nx)
            .map(|i| {
                let wc = self.state.f_inf.column(i);
                let xc = &x[i * nv..(i + 1) * nv];
                let flux = pairwise_sum_by(nv - 1, |j| {
                    let dp = (xc[j + 1] / wc[j + 1] - xc[j] / wc[j]) / dv;
                    dp * 0.5 * (wc[j] + wc[j + 1]) * self.dpsi_face[a][i * nv + j]
                }) * dv;
                let extra = if third {
                    let mc = self.model.m.column(i);
                    pairwise_sum_by(nv, |j| xc[j] / mc[j] * self.m_flux_psi[a][i * nv + j]) * dv
                } else {
                    0.0
                };
                -(flux + extra) / self.state.density.values[i]
            })
            .collect()
    }

    /// `-1/2 [(rho_inf M - f_inf) h / f_inf - f_inf <M h / f_inf>]`.
    fn bgk_third(&self, h: &[f64]) -> Vec<f64> {
        let g = self.model.grid;
        let (nx, nv, dv) = (g.nx, g.nv, g.dv());
        let mut out = vec![0.0; h.len()];
        for i in 0..nx {
            let (wc, mc) = (self.state.f_inf.column(i), self.model.m.column(i));
            let hc = &h[i * nv..(i + 1) * nv];
            let r = self.state.density.values[i];
            let mean = pairwise_sum_by(nv, |j| mc[j] * hc[j] / wc[j]) * dv;
            for j in 0..nv {
                out[i * nv + j] = -0.5 * ((r * mc[j] - wc[j]) * hc[j] / wc[j] - wc[j] * mean);
            }
        }
        out
    }

    /// `1/2 int [p(v*) - p(v)] [M(v) f_inf(v*) + M(v*) f_inf(v)] dv*`, `p = f / f_inf`.
    fn bgk_fourth(&self, f: &[f64]) -> Vec<f64> {
        let g = self.model.grid;
        let (nx, nv, dv) = (g.nx, g.nv, g.dv());
        let mut out = vec![0.0; f.len()];
        for i in 0..nx {
            let (wc, mc) = (self.state.f_inf.column(i), self.model.m.column(i));
            let fc = &f[i * nv..(i + 1) * nv];
            let pw = pairwise_sum_by(nv, |k| fc[k]) * dv;
            let pm = pairwise_sum_by(nv, |k| fc[k] / wc[k] * mc[k]) * dv;
            let sw = pairwise_sum_by(nv, |k| wc[k]) * dv;
            let sm = pairwise_sum_by(nv, |k| mc[k]) * dv;
            for j in 0..nv {
                let p = fc[j] / wc[j];
                out[i * nv + j] = 0.5 * (mc[j] * pw + wc[j] * pm - p * (mc[j] * sw + wc[j] * sm));
            }
        }
        out
    }
}

pub fn assemble_kj(traj: &Trajectory, state: &StationaryState, model: &KineticModel, tf: &TestFunctions) -> Result<KJFields> {
    assemble_kj_with(traj, state, model, tf, CollisionTermForm::Specialized)
}

pub fn assemble_kj_with(
    traj: &Trajectory,
    state: &StationaryState,
    model: &KineticModel,
    tf: &TestFunctions,
    form: CollisionTermForm,
) -> Result<KJFields> {
    let ctx = KJContext::new(model, state, tf, form)?;
    let mut out = KJFields::new(model.grid, traj.dt * traj.stride as f64);
    for f in &traj.snapshots {
        out.push(&ctx.slice(f)?);
    }
    Ok(out)
}

/// Time derivative of a row-major `(n, i)` field: centered inside,
/// one-sided second order at both ends.
pub fn dt_centered(values: &[f64], nt: usize, nx: usize, dt: f64) -> Vec<f64> {
    let at = |n: usize, i: usize| values[n * nx + i];
    let mut out = vec![0.0; values.len()];
    if nt < 3 {
        return out;
    }
    for n in 0..nt {
        for i in 0..nx {
            out[n * nx + i] = if n == 0 {
                (-3.0 * at(0, i) + 4.0 * at(1, i) - at(2, i)) / (2.0 * dt)
            } else if n + 1 == nt {
                (3.0 * at(n, i) - 4.0 * at(n - 1, i) + at(n - 2, i)) / (2.0 * dt)
            } else {
                (at(n + 1, i) - at(n - 1, i)) / (2.0 * dt)
            };
        }
    }
    out
}

fn dx_rows(values: &[f64], nt: usize, grid: &Grid) -> Vec<f64> {
    let nx = grid.nx;
    (0..nt).flat_map(|n| dx_centered(&values[n * nx..(n + 1) * nx], grid)).collect()
}

/// `int int x^2 weight dx dt` for a row-major field.
fn spacetime_sq(values: &[f64], nt: usize, grid: &Grid, dt: f64, weight: &[f64]) -> f64 {
    let nx = grid.nx;
    let rows: Vec<f64> = (0..nt)
        .map(|n| pairwise_sum_by(nx, |i| values[n * nx + i].powi(2) * weight[i]) * grid.dx())
        .collect();
    trapezoid(&rows, dt)
}

/// Largest, over both components, `rho_inf / w`-weighted space-time norm of
/// `d_a u - K_a - d_t J_a0 - d_x J_a1`.
pub fn representation_residual(kj: &KJFields, state: &StationaryState) -> f64 {
    let (g, nt, nx) = (kj.grid, kj.nt, kj.grid.nx);
    if nt < 3 {
        return 0.0;
    }
    let weight: Vec<f64> = (0..nx).map(|i| state.density.values[i] / state.w.values[i]).collect();
    let du = [dt_centered(&kj.u, nt, nx, kj.dt), dx_rows(&kj.u, nt, &g)];
    (0..2)
        .map(|a| {
            let djt = dt_centered(&kj.j[a][0], nt, nx, kj.dt);
            let djx = dx_rows(&kj.j[a][1], nt, &g);
            let r: Vec<f64> = (0..nt * nx).map(|k| du[a][k] - kj.k[a][k] - djt[k] - djx[k]).collect();
            spacetime_sq(&r, nt, &g, kj.dt, &weight).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Measured constants of the `K` and `J` bounds relative to the dissipation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KJRatios {
    pub ratio_k: f64,
    pub ratio_j: f64,
    pub k_norm_sq: f64,
    pub j_norm_sq: f64,
    pub dissipation_integral: f64,
}

/// `dissipation` is sampled every `dt_d` over the same window as `kj`.
pub fn check_kj_bounds(kj: &KJFields, dissipation: &[f64], dt_d: f64, state: &StationaryState) -> Result<KJRatios> {
    let g = kj.grid;
    let d = trapezoid(dissipation, dt_d);
    let nx = g.nx;
    // Dissipation at round-off level relative to the density signal counts as zero.
    let u_sq = spacetime_sq(&kj.u, kj.nt, &g, kj.dt, &state.density.values);
    if !(d > 1e-24 * u_sq) || !(d > 0.0) {
        return Err(HypoError::ZeroDissipation);
    }
    let wk: Vec<f64> = (0..nx).map(|i| state.density.values[i] / state.w.values[i]).collect();
    let wj: Vec<f64> = state.density.values.clone();
    let k_norm_sq: f64 = (0..2).map(|a| spacetime_sq(&kj.k[a], kj.nt, &g, kj.dt, &wk)).sum();
    let j_norm_sq: f64 = (0..2).flat_map(|a| (0..2).map(move |b| (a, b))).map(|(a, b)| spacetime_sq(&kj.j[a][b], kj.nt, &g, kj.dt, &wj)).sum();
    Ok(KJRatios { ratio_k: k_norm_sq / d, ratio_j: j_norm_sq / d, k_norm_sq, j_norm_sq, dissipation_integral: d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coercivity::build_test_functions;
    use crate::evolution::evolve;
    use crate::models::{ForceProfile, TemperatureProfile, TransportScheme};
    use crate::steady::{compute_stationary, SteadyMethod, SteadyOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(kind: CollisionKind, nx: usize, nv: usize) -> (KineticModel, StationaryState, TestFunctions) {
        let grid = Grid::new(nx, 1.0, nv, 6.0, 1e-3, 1.0).unwrap();
        let force = ForceProfile::Sinusoidal { amplitude: 0.5 };
        let m = KineticModel::new(grid, kind, &TemperatureProfile::default(), &force, TransportScheme::Upwind).unwrap();
        let s = compute_stationary(&m, SteadyMethod::Nullspace, &SteadyOptions::default()).unwrap();
        let tf = build_test_functions(&s, &m).unwrap();
        (m, s, tf)
    }

    fn random_field(grid: Grid, seed: u64) -> PhaseField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        PhaseField::from_values(grid, values).unwrap()
    }

    #[test]
    fn local_equilibrium_has_no_flux_part() {
        for kind in [CollisionKind::Fp, CollisionKind::Bgk] {
            let (m, s, tf) = setup(kind, 16, 48);
            let ctx = KJContext::new(&m, &s, &tf, CollisionTermForm::Specialized).unwrap();
            let mut f = s.f_inf.clone();
            for i in 0..16 {
                let c = 1.0 + 0.3 * (i as f64).sin();
                f.column_mut(i).iter_mut().for_each(|x| *x *= c);
            }
            let sl = ctx.slice(&f).unwrap();
            let scale = sl.u.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            for a in 0..2 {
                for b in 0..2 {
                    assert!(sl.j[a][b].iter().all(|x| x.abs() < 1e-12 * scale));
                }
                for t in 0..3 {
                    assert!(sl.k_terms[t][a].iter().all(|x| x.abs() < 1e-10 * scale), "{kind:?} term {t}");
                }
            }
            if kind == CollisionKind::Fp {
                assert!(sl.k_terms[3].iter().flatten().all(|x| x.abs() < 1e-10 * scale));
            }
        }
    }

    #[test]
    fn zero_field_gives_zero() {
        let (m, s, tf) = setup(CollisionKind::Bgk, 8, 32);
        let ctx = KJContext::new(&m, &s, &tf, CollisionTermForm::Generic).unwrap();
        let sl = ctx.slice(&PhaseField::zeros(m.grid)).unwrap();
        assert!(sl.k.iter().chain(sl.j.iter().flatten()).flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn flux_matches_direct_quadrature() {
        let (m, s, tf) = setup(CollisionKind::Fp, 8, 32);
        let g = m.grid;
        let f = random_field(g, 3);
        let sl = KJContext::new(&m, &s, &tf, CollisionTermForm::Specialized).unwrap().slice(&f).unwrap();
        for i in 0..g.nx {
            let mut rho = 0.0;
            let mut rho_inf = 0.0;
            for j in 0..g.nv {
                rho += f.at(i, j) * g.dv();
                rho_inf += s.f_inf.at(i, j) * g.dv();
            }
            for a in 0..2 {
                for b in 0..2 {
                    let mut acc = 0.0;
                    for j in 0..g.nv {
                        let vb = if b == 0 { 1.0 } else { g.v(j) };
                        acc += (rho * s.f_inf.at(i, j) / rho_inf - f.at(i, j)) * vb * tf.psi[a].at(i, j) / rho_inf * g.dv();
                    }
                    assert!((acc - sl.j[a][b][i]).abs() <= 1e-12 * (1.0 + acc.abs()));
                }
            }
        }
    }

    #[test]
    fn bgk_forms_agree_exactly() {
        let (m, s, tf) = setup(CollisionKind::Bgk, 8, 32);
        let f = random_field(m.grid, 5);
        let a = KJContext::new(&m, &s, &tf, CollisionTermForm::Specialized).unwrap().slice(&f).unwrap();
        let b = KJContext::new(&m, &s, &tf, CollisionTermForm::Generic).unwrap().slice(&f).unwrap();
        for t in 2..4 {
            for c in 0..2 {
                for i in 0..8 {
                    let (x, y) = (a.k_terms[t][c][i], b.k_terms[t][c][i]);
                    assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()), "term {t}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn bgk_jump_form_matches_double_sum() {
        let (m, s, tf) = setup(CollisionKind::Bgk, 4, 16);
        let f = random_field(m.grid, 8);
        let ctx = KJContext::new(&m, &s, &tf, CollisionTermForm::Specialized).unwrap();
        let fast = ctx.bgk_fourth(&f.values);
        let g = m.grid;
        for i in 0..g.nx {
            for j in 0..g.nv {
                let p = |k: usize| f.at(i, k) / s.f_inf.at(i, k);
                let mut acc = 0.0;
                for k in 0..g.nv {
                    acc += (p(k) - p(j)) * (m.m.at(i, j) * s.f_inf.at(i, k) + m.m.at(i, k) * s.f_inf.at(i, j)) * g.dv();
                }
                assert!((0.5 * acc - fast[g.idx(i, j)]).abs() < 1e-12 * (1.0 + acc.abs()));
            }
        }
    }

    #[test]
    fn fp_forms_converge_to_each_other() {
        let mut diffs = Vec::new();
        for nv in [32usize, 64, 128] {
            let (m, s, tf) = setup(CollisionKind::Fp, 8, nv);
            let g = m.grid;
            let f = PhaseField::from_fn(g, |x, v| {
                let t = 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x).sin();
                (1.0 + 0.4 * v + 0.2 * v * v * (3.0 * x).cos()) * (-v * v / (2.0 * t)).exp()
            });
            let a = KJContext::new(&m, &s, &tf, CollisionTermForm::Specialized).unwrap().slice(&f).unwrap();
            let b = KJContext::new(&m, &s, &tf, CollisionTermForm::Generic).unwrap().slice(&f).unwrap();
            let d = (0..2).flat_map(|c| (0..8).map(move |i| (c, i))).map(|(c, i)| (a.k[c][i] - b.k[c][i]).abs()).fold(0.0, f64::max);
            diffs.push(d);
        }
        assert!(diffs[2] < diffs[1] && diffs[1] < diffs[0], "{diffs:?}");
        assert!(diffs[0] / diffs[2] > 3.0, "{diffs:?}");
    }

    #[test]
    fn bound_ratios_are_quadratic_invariant() {
        let (m, s, tf) = setup(CollisionKind::Bgk, 16, 32);
        let dt = 0.5 * m.cfl_limit();
        let mut f0 = random_field(m.grid, 2);
        let mass = f0.mass();
        f0.axpy(-mass, &s.f_inf);
        let tr = evolve(&f0, &m, &s.f_inf, dt, 40, 1).unwrap();
        let kj = assemble_kj(&tr, &s, &m, &tf).unwrap();
        assert!(kj.is_finite());
        let r1 = check_kj_bounds(&kj, &tr.dissipation, dt, &s).unwrap();
        f0.scale(2.0);
        let tr2 = evolve(&f0, &m, &s.f_inf, dt, 40, 1).unwrap();
        let r2 = check_kj_bounds(&assemble_kj(&tr2, &s, &m, &tf).unwrap(), &tr2.dissipation, dt, &s).unwrap();
        assert!((r1.ratio_k - r2.ratio_k).abs() < 1e-10 * r1.ratio_k);
        assert!((r1.ratio_j - r2.ratio_j).abs() < 1e-10 * r1.ratio_j);
    }

    #[test]
    fn local_equilibrium_trajectory_has_zero_dissipation() {
        let (m, s, tf) = setup(CollisionKind::Bgk, 8, 32);
        let ctx = KJContext::new(&m, &s, &tf, CollisionTermForm::Specialized).unwrap();
        let mut kj = KJFields::new(m.grid, 0.1);
        let mut d = Vec::new();
        for n in 0..5 {
            let mut f = s.f_inf.clone();
            for i in 0..8 {
                let c = (0.3 * n as f64 + i as f64).cos();
                f.column_mut(i).iter_mut().for_each(|x| *x *= c);
            }
            kj.push(&ctx.slice(&f).unwrap());
            d.push(crate::evolution::dissipation(&f, &m, &s.f_inf).unwrap());
        }
        assert!(matches!(check_kj_bounds(&kj, &d, 0.1, &s), Err(HypoError::ZeroDissipation)));
        assert_eq!(representation_residual(&KJFields::new(m.grid, 0.1), &s), 0.0);
    }
}
