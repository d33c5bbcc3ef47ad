//! Local coercivity constant and the moment-matching test functions.

use nalgebra::{DMatrix, Matrix2, SymmetricEigen, Vector2};
use rayon::prelude::*;

use crate::error::{HypoError, Result};
use crate::grid::{Grid, PhaseField};
use crate::models::{CollisionKind, KineticModel};
use crate::numerics::pairwise_sum_by;
use crate::steady::{dx_centered, StationaryState};

/// Per-column velocity Dirichlet form in `p = g / f_inf`, without the `dx` factor.
pub fn column_dirichlet_matrix(model: &KineticModel, f_inf: &PhaseField, i: usize) -> DMatrix<f64> {
    let g = model.grid;
    let (nv, dv) = (g.nv, g.dv());
    let w = f_inf.column(i);
    let mut k = DMatrix::zeros(nv, nv);
    match model.kind {
        CollisionKind::Fp => {
            for j in 0..nv - 1 {
                let mf = model.m_at_face(i, j + 1) / (dv * dv);
                let c = 0.5 * mf * (w[j] / model.m.at(i, j) + w[j + 1] / model.m.at(i, j + 1)) * dv;
                k[(j, j)] += c;
                k[(j + 1, j + 1)] += c;
                k[(j, j + 1)] -= c;
                k[(j + 1, j)] -= c;
            }
        }
        CollisionKind::Bgk => {
            let m = model.m.column(i);
            let sm = pairwise_sum_by(nv, |j| m[j]);
            let sw = pairwise_sum_by(nv, |j| w[j]);
            let s = 0.5 * dv * dv;
            for a in 0..nv {
                k[(a, a)] += s * (m[a] * sw + w[a] * sm);
                for b in 0..nv {
                    k[(a, b)] -= s * (m[a] * w[b] + w[a] * m[b]);
                }
            }
        }
    }
    k
}

/// Coercivity constant of one column: the inverse of the spectral gap of
/// the Dirichlet form relative to `sum f_inf p^2 dv` on `p` of zero mean.
pub fn lambda1(state: &StationaryState, model: &KineticModel, i: usize) -> Result<f64> {
    let g = model.grid;
    let (nv, dv) = (g.nv, g.dv());
    let k = column_dirichlet_matrix(model, &state.f_inf, i);
    let w = state.f_inf.column(i);
    if w.iter().any(|&x| !(x > 0.0)) {
        return Err(HypoError::SpectralFailure(format!("stationary weight vanishes in column {i}")));
    }
    let s: Vec<f64> = w.iter().map(|&x| 1.0 / (x * dv).sqrt()).collect();
    let sym = DMatrix::from_fn(nv, nv, |a, b| s[a] * k[(a, b)] * s[b]);
    let eig = SymmetricEigen::new(sym);
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let top = ev[nv - 1].abs().max(f64::MIN_POSITIVE);
    if ev[0].abs() > 1e-9 * top || ev[1] <= 1e3 * ev[0].abs() || ev[1] <= 0.0 {
        return Err(HypoError::SpectralFailure(format!(
            "kernel not isolated in column {i}: {:e}, {:e}",
            ev[0], ev[1]
        )));
    }
    Ok(1.0 / ev[1])
}

/// Per-column constants and their maximum.
pub fn lambda1_global(state: &StationaryState, model: &KineticModel) -> Result<(f64, Vec<f64>)> {
    let per: Vec<f64> = (0..model.grid.nx).into_par_iter().map(|i| lambda1(state, model, i)).collect::<Result<_>>()?;
    let max = per.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok((max, per))
}

/// Quintic smoothstep `6s^5 - 15s^4 + 10s^3` on `[0, 1]`.
fn smoothstep(s: f64) -> (f64, f64, f64) {
    let s = s.clamp(0.0, 1.0);
    let v = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
    let d1 = 30.0 * s * s * (s - 1.0) * (s - 1.0);
    let d2 = 60.0 * s * (2.0 * s * s - 3.0 * s + 1.0);
    (v, d1, d2)
}

/// Cutoff: one on `|v| <= 1/2`, zero on `|v| >= 1`, with first and second derivatives.
pub fn cutoff(v: f64) -> (f64, f64, f64) {
    let a = v.abs();
    if a <= 0.5 {
        return (1.0, 0.0, 0.0);
    }
    if a >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let (s, d1, d2) = smoothstep(2.0 * a - 1.0);
    let sg = v.signum();
    (1.0 - s, -2.0 * d1 * sg, -4.0 * d2)
}

/// Test functions `psi_0, psi_1` of every column.
#[derive(Debug, Clone)]
pub struct TestFunctions {
    pub grid: Grid,
    /// `chi(v_j)`.
    pub chi: Vec<f64>,
    /// Moment matrix per column.
    pub moment: Vec<Matrix2<f64>>,
    pub moment_inv: Vec<Matrix2<f64>>,
    /// `psi[i]` on the phase grid.
    pub psi: [PhaseField; 2],
    /// Analytic `d psi / dv` and `d^2 psi / dv^2`.
    pub dpsi: [PhaseField; 2],
    pub d2psi: [PhaseField; 2],
    pub bounds: PsiBounds,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiBounds {
    pub sup_psi: f64,
    pub sup_dv: f64,
    pub sup_dvv: f64,
    /// `sup |d psi/dx| / sqrt(w)`.
    pub sup_dx_over_sqrt_w: f64,
}

impl PsiBounds {
    pub fn total(&self) -> f64 {
        self.sup_psi + self.sup_dv + self.sup_dvv + self.sup_dx_over_sqrt_w
    }
}

/// Condition number beyond which the moment matrix counts as singular.
pub const MOMENT_COND_LIMIT: f64 = 1e8;

pub fn build_test_functions(state: &StationaryState, model: &KineticModel) -> Result<TestFunctions> {
    let g = model.grid;
    let (nx, nv, dv) = (g.nx, g.nv, g.dv());
    let cut: Vec<(f64, f64, f64)> = (0..nv).map(|j| cutoff(g.v(j))).collect();
    let chi: Vec<f64> = cut.iter().map(|c| c.0).collect();
    let mut moment = Vec::with_capacity(nx);
    let mut moment_inv = Vec::with_capacity(nx);
    for i in 0..nx {
        let rho = state.density.values[i];
        let col = state.f_inf.column(i);
        let mom = |p: i32| pairwise_sum_by(nv, |j| col[j] / rho * g.v(j).powi(p) * chi[j]) * dv;
        let m = Matrix2::new(mom(0), mom(1), mom(1), mom(2));
        let eig = m.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition <= MOMENT_COND_LIMIT) {
            return Err(HypoError::SingularMoment { x_cell: i, condition });
        }
        moment_inv.push(m.try_inverse().ok_or(HypoError::SingularMoment { x_cell: i, condition })?);
        moment.push(m);
    }
    let mut psi = [PhaseField::zeros(g), PhaseField::zeros(g)];
    let mut dpsi = [PhaseField::zeros(g), PhaseField::zeros(g)];
    let mut d2psi = [PhaseField::zeros(g), PhaseField::zeros(g)];
    for i in 0..nx {
        let inv = moment_inv[i];
        for j in 0..nv {
            let v = g.v(j);
            let (c, c1, c2) = cut[j];
            // e_0 = chi, e_1 = v chi.
            let e = Vector2::new(c, v * c);
            let e1 = Vector2::new(c1, c + v * c1);
            let e2 = Vector2::new(c2, 2.0 * c1 + v * c2);
            let k = g.idx(i, j);
            for a in 0..2 {
                psi[a].values[k] = inv[(a, 0)] * e[0] + inv[(a, 1)] * e[1];
                dpsi[a].values[k] = inv[(a, 0)] * e1[0] + inv[(a, 1)] * e1[1];
                d2psi[a].values[k] = inv[(a, 0)] * e2[0] + inv[(a, 1)] * e2[1];
            }
        }
    }
    let sup = |f: &PhaseField| f.values.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut sup_dx = 0.0f64;
    for p in &psi {
        for j in 0..nv {
            let line: Vec<f64> = (0..nx).map(|i| p.at(i, j)).collect();
            for (i, d) in dx_centered(&line, &g).into_iter().enumerate() {
                sup_dx = sup_dx.max(d.abs() / state.w.values[i].sqrt());
            }
        }
    }
    let bounds = PsiBounds {
        sup_psi: sup(&psi[0]).max(sup(&psi[1])),
        sup_dv: sup(&dpsi[0]).max(sup(&dpsi[1])),
        sup_dvv: sup(&d2psi[0]).max(sup(&d2psi[1])),
        sup_dx_over_sqrt_w: sup_dx,
    };
    Ok(TestFunctions { grid: g, chi, moment, moment_inv, psi, dpsi, d2psi, bounds })
}

impl TestFunctions {
    /// Largest deviation of `sum (f_inf/rho) psi_a v^b dv` from `delta_ab`.
    pub fn moment_defect(&self, state: &StationaryState) -> f64 {
        let g = self.grid;
        let dv = g.dv();
        let mut worst = 0.0f64;
        for i in 0..g.nx {
            let rho = state.density.values[i];
            let col = state.f_inf.column(i);
            for a in 0..2 {
                for b in 0..2 {
                    let s = pairwise_sum_by(g.nv, |j| col[j] / rho * self.psi[a].at(i, j) * g.v(j).powi(b as i32)) * dv;
                    let e = if a == b { 1.0 } else { 0.0 };
                    worst = worst.max((s - e).abs());
                }
            }
        }
        worst
    }

    /// True when every `psi` vanishes bitwise outside `|v| < 1`.
    pub fn support_in_unit_ball(&self) -> bool {
        let g = self.grid;
        (0..g.nx).all(|i| {
            (0..g.nv).all(|j| g.v(j).abs() < 1.0 || (self.psi[0].at(i, j) == 0.0 && self.psi[1].at(i, j) == 0.0))
        })
    }

    /// Smallest eigenvalue of the moment matrices.
    pub fn moment_floor(&self) -> f64 {
        self.moment.iter().map(|m| m.symmetric_eigenvalues().min()).fold(f64::INFINITY, f64::min)
    }
}

/// Smallest eigenvalue of `sum_{|v| <= 1} chi (1, v)(1, v)^T dv`.
pub fn cutoff_gram_floor(grid: &Grid) -> f64 {
    let dv = grid.dv();
    let mut m = Matrix2::zeros();
    for j in (0..grid.nv).filter(|&j| grid.in_unit_ball(j)) {
        let v = grid.v(j);
        let c = cutoff(v).0;
        m += Matrix2::new(1.0, v, v, v * v) * (c * dv);
    }
    m.symmetric_eigenvalues().min()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ForceProfile, TemperatureProfile, TransportScheme};
    use crate::steady::{compute_stationary, state_from_field, SteadyMethod, SteadyOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn isothermal(kind: CollisionKind, nv: usize) -> (KineticModel, StationaryState) {
        let grid = Grid::new(4, 1.0, nv, 6.0, 1e-3, 1.0).unwrap();
        let m = KineticModel::new(
            grid,
            kind,
            &TemperatureProfile::Constant { value: 1.0 },
            &ForceProfile::Zero,
            TransportScheme::Upwind,
        )
        .unwrap();
        let mut f = m.m.clone();
        f.scale(1.0 / grid.lx);
        let s = state_from_field(&m, f).unwrap();
        (m, s)
    }

    fn default_state(kind: CollisionKind, nx: usize, nv: usize) -> (KineticModel, StationaryState) {
        let grid = Grid::new(nx, 1.0, nv, 6.0, 1e-3, 1.0).unwrap();
        let m = KineticModel::new(grid, kind, &TemperatureProfile::default(), &ForceProfile::Zero, TransportScheme::Upwind)
            .unwrap();
        let s = compute_stationary(&m, SteadyMethod::Nullspace, &SteadyOptions::default()).unwrap();
        (m, s)
    }

    #[test]
    fn bgk_with_background_profile_has_unit_constant() {
        let (m, s) = isothermal(CollisionKind::Bgk, 32);
        for i in 0..4 {
            let l = lambda1(&s, &m, i).unwrap();
            assert!((l - 1.0).abs() < 1e-10, "{l}");
        }
    }

    #[test]
    fn bgk_brute_force_four_point_identity() {
        // Jump form and norm form on a 4-point grid, by explicit double sums.
        let (m, s) = isothermal(CollisionKind::Bgk, 4);
        let dv = m.grid.dv();
        let w: Vec<f64> = s.f_inf.column(0).to_vec();
        let mm: Vec<f64> = m.m.column(0).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mut g: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mean: f64 = g.iter().sum::<f64>() * dv;
            let rho: f64 = w.iter().sum::<f64>() * dv;
            for j in 0..4 {
                g[j] -= mean * w[j] / rho;
            }
            let mut jump = 0.0;
            for a in 0..4 {
                for b in 0..4 {
                    jump += (g[a] / w[a] - g[b] / w[b]).powi(2) * w[a] * mm[b] * dv * dv;
                }
            }
            let norm: f64 = (0..4).map(|j| g[j] * g[j] / w[j] * dv).sum();
            assert!((jump - 2.0 * norm).abs() <= 1e-12 * norm);
        }
        assert!((lambda1(&s, &m, 0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fp_gaussian_constant_tends_to_one() {
        let errs: Vec<f64> = [32usize, 64, 128]
            .iter()
            .map(|&nv| {
                let (m, s) = isothermal(CollisionKind::Fp, nv);
                (lambda1(&s, &m, 0).unwrap() - 1.0).abs()
            })
            .collect();
        assert!(errs[2] < errs[1] && errs[1] < errs[0], "{errs:?}");
        assert!(errs[2] < 0.01, "{errs:?}");
    }

    /// Minimise `p'Kp / p'Bp` over `p` with zero `B`-mean, independent of any eigensolver.
    fn rayleigh_descent(k: &DMatrix<f64>, b: &[f64], mut x: Vec<f64>, iters: usize) -> f64 {
        let n = b.len();
        let total: f64 = b.iter().sum();
        let project = |y: &mut Vec<f64>| {
            let m: f64 = y.iter().zip(b).map(|(a, w)| a * w).sum::<f64>() / total;
            y.iter_mut().for_each(|v| *v -= m);
        };
        let bdot = |u: &[f64], v: &[f64]| u.iter().zip(v).zip(b).map(|((a, c), w)| a * c * w).sum::<f64>();
        let kmul = |u: &[f64]| (k * nalgebra::DVector::from_column_slice(u)).iter().copied().collect::<Vec<f64>>();
        project(&mut x);
        let mut prev: Option<Vec<f64>> = None;
        let mut mu = f64::INFINITY;
        for _ in 0..iters {
            let kx = kmul(&x);
            let xx = bdot(&x, &x);
            mu = x.iter().zip(&kx).map(|(a, c)| a * c).sum::<f64>() / xx;
            let mut r: Vec<f64> = (0..n).map(|j| kx[j] / b[j] - mu * x[j]).collect();
            project(&mut r);
            let mut basis = vec![x.clone(), r];
            if let Some(p) = prev.take() {
                basis.push(p);
            }
            // B-orthonormalize, dropping dependent directions.
            let mut q: Vec<Vec<f64>> = Vec::new();
            for mut y in basis {
                for z in &q {
                    let c = bdot(&y, z);
                    y.iter_mut().zip(z).for_each(|(a, c2)| *a -= c * c2);
                }
                let nrm = bdot(&y, &y).sqrt();
                if nrm > 1e-12 * xx.sqrt() {
                    y.iter_mut().for_each(|a| *a /= nrm);
                    q.push(y);
                }
            }
            let m = q.len();
            let kq: Vec<Vec<f64>> = q.iter().map(|y| kmul(y)).collect();
            let small = DMatrix::from_fn(m, m, |a, c| q[a].iter().zip(&kq[c]).map(|(u, v)| u * v).sum::<f64>());
            let small = (&small + small.transpose()) * 0.5;
            let eig = SymmetricEigen::new(small);
            let lo = (0..m).min_by(|&a, &c| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[c]).unwrap()).unwrap();
            let coef = eig.eigenvectors.column(lo);
            let next: Vec<f64> = (0..n).map(|j| (0..m).map(|a| coef[a] * q[a][j]).sum()).collect();
            prev = Some((0..n).map(|j| next[j] - coef[0] * q[0][j]).collect());
            x = next;
            project(&mut x);
        }
        mu
    }

    #[test]
    fn random_search_bounds_the_spectral_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [CollisionKind::Fp, CollisionKind::Bgk] {
            let (m, s) = default_state(kind, 8, 32);
            let dv = m.grid.dv();
            for i in [0usize, 3, 6] {
                let mu = 1.0 / lambda1(&s, &m, i).unwrap();
                let k = column_dirichlet_matrix(&m, &s.f_inf, i);
                let w = s.f_inf.column(i);
                let nv = m.grid.nv;
                let quotient = |p: &mut Vec<f64>| {
                    let mean: f64 = p.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>();
                    p.iter_mut().for_each(|x| *x -= mean);
                    let pv = nalgebra::DVector::from_vec(p.clone());
                    let num = (pv.transpose() * &k * &pv)[(0, 0)];
                    let den: f64 = p.iter().zip(w).map(|(a, b)| a * a * b * dv).sum();
                    num / den
                };
                let mut starts: Vec<(f64, Vec<f64>)> = (0..1000)
                    .map(|_| {
                        let mut p: Vec<f64> = (0..nv).map(|_| rng.random_range(-1.0..1.0)).collect();
                        (quotient(&mut p), p)
                    })
                    .collect();
                assert!(starts.iter().all(|(q, _)| *q >= mu * (1.0 - 1e-10)), "{kind:?}");
                starts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                // Descend from the best starts with a three-term Rayleigh-Ritz iteration.
                let bw: Vec<f64> = w.iter().map(|&x| x * dv).collect();
                let mut best = f64::INFINITY;
                for (_, p0) in starts.into_iter().take(5) {
                    best = best.min(rayleigh_descent(&k, &bw, p0, 300));
                }
                assert!(best >= mu * (1.0 - 1e-8), "{kind:?}");
                assert!(best <= mu * 1.05, "{kind:?} col {i}: {best} vs {mu}");
            }
        }
    }

    #[test]
    fn cutoff_shape_and_derivatives() {
        assert_eq!(cutoff(0.3), (1.0, 0.0, 0.0));
        assert_eq!(cutoff(1.0), (0.0, 0.0, 0.0));
        assert_eq!(cutoff(-1.2).0, 0.0);
        let h = 1e-5;
        for &v in &[0.55, 0.7, -0.8, 0.95] {
            let (_, d1, d2) = cutoff(v);
            let fd1 = (cutoff(v + h).0 - cutoff(v - h).0) / (2.0 * h);
            let fd2 = (cutoff(v + h).0 - 2.0 * cutoff(v).0 + cutoff(v - h).0) / (h * h);
            assert!((d1 - fd1).abs() < 1e-6);
            assert!((d2 - fd2).abs() < 1e-3);
        }
    }

    #[test]
    fn test_functions_satisfy_moment_identities() {
        for kind in [CollisionKind::Bgk, CollisionKind::Fp] {
            let (m, s) = default_state(kind, 16, 64);
            let tf = build_test_functions(&s, &m).unwrap();
            assert!(tf.moment_defect(&s) <= 1e-10);
            assert!(tf.support_in_unit_ball());
            assert!(tf.moment_floor() >= s.c_inf * cutoff_gram_floor(&m.grid) * (1.0 - 1e-12));
            assert!(tf.bounds.total().is_finite());
        }
    }

    #[test]
    fn even_columns_give_parity_split() {
        let (m, s) = isothermal(CollisionKind::Bgk, 64);
        let tf = build_test_functions(&s, &m).unwrap();
        let mm = tf.moment[0];
        assert!(mm[(0, 1)].abs() < 1e-15);
        let nv = m.grid.nv;
        for j in 0..nv {
            let r = nv - 1 - j;
            assert!((tf.psi[0].at(0, j) - tf.psi[0].at(0, r)).abs() < 1e-13);
            assert!((tf.psi[1].at(0, j) + tf.psi[1].at(0, r)).abs() < 1e-13);
        }
    }
}
