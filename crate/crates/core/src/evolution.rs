//! Strang-split time stepping and the dissipation functional.

use crate::error::{HypoError, Result};
use crate::generator::{generator_apply, transport_into};
use crate::grid::{fmt17, weighted_inner, weighted_norm_sq, PhaseField};
use crate::models::{ratio, CollisionKind, KineticModel};
use crate::numerics::{pairwise_sum_by, solve_tridiagonal};

/// Velocity dissipation with the full quadratic form alongside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dissipation {
    /// Collision part; vanishes exactly on `c(x) f_inf`.
    pub velocity: f64,
    /// `-<f, A f>_w`, the rate at which the weighted norm actually decays.
    pub total: f64,
}

impl Dissipation {
    /// Numerical dissipation of transport and force.
    pub fn numerical(&self) -> f64 {
        self.total - self.velocity
    }
}

/// The velocity dissipation `D(f)` of the collision kernel.
pub fn dissipation(f: &PhaseField, model: &KineticModel, f_inf: &PhaseField) -> Result<f64> {
    if !f.grid.same_shape(&model.grid) || !f_inf.grid.same_shape(&model.grid) {
        return Err(HypoError::DimensionMismatch("dissipation arguments differ in shape".into()));
    }
    let p = ratio(f, f_inf)?;
    let g = model.grid;
    let (nx, nv) = (g.nx, g.nv);
    let vol = g.cell_volume();
    let per_column = |i: usize| -> f64 {
        let pc = &p[i * nv..(i + 1) * nv];
        let wc = f_inf.column(i);
        match model.kind {
            CollisionKind::Fp => {
                let h2 = 1.0 / (g.dv() * g.dv());
                pairwise_sum_by(nv - 1, |j| {
                    let mf = model.m_at_face(i, j + 1) * h2;
                    let a = wc[j] / model.m.at(i, j) + wc[j + 1] / model.m.at(i, j + 1);
                    let d = pc[j + 1] - pc[j];
                    0.5 * mf * a * d * d
                })
            }
            CollisionKind::Bgk => {
                let dv = g.dv();
                let mc = model.m.column(i);
                let wsum = pairwise_sum_by(nv, |k| wc[k]);
                if wsum == 0.0 {
                    return 0.0;
                }
                // Shifting p by its f_inf-mean kills the cross term of the double sum.
                let c = pairwise_sum_by(nv, |k| wc[k] * pc[k]) / wsum;
                let mq2 = pairwise_sum_by(nv, |j| mc[j] * (pc[j] - c).powi(2));
                let wq2 = pairwise_sum_by(nv, |k| wc[k] * (pc[k] - c).powi(2));
                let msum = pairwise_sum_by(nv, |j| mc[j]);
                0.5 * dv * (mq2 * wsum + msum * wq2)
            }
        }
    };
    Ok(pairwise_sum_by(nx, per_column) * vol)
}

/// Both the velocity dissipation and `-<f, A f>_w`.
pub fn dissipation_breakdown(f: &PhaseField, model: &KineticModel, f_inf: &PhaseField) -> Result<Dissipation> {
    let velocity = dissipation(f, model, f_inf)?;
    let af = generator_apply(f, model)?;
    let total = -weighted_inner(f, &af, f_inf)?;
    Ok(Dissipation { velocity, total })
}

/// Precomputed stepping data for one model and step size.
#[derive(Debug, Clone)]
pub struct Stepper<'a> {
    pub model: &'a KineticModel,
    pub dt: f64,
    fp: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    scratch: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a KineticModel, dt: f64) -> Result<Self> {
        let limit = model.cfl_limit();
        if !(dt > 0.0) || dt > limit {
            return Err(HypoError::CflViolation { dt, limit });
        }
        let fp = if model.kind == CollisionKind::Fp {
            (0..model.grid.nx).map(|i| model.fp_tridiagonal(i)).collect()
        } else {
            Vec::new()
        };
        Ok(Self { model, dt, fp, scratch: vec![0.0; model.grid.len()] })
    }

    /// Heun step of the transport and force part over `h`.
    fn transport(&mut self, f: &mut [f64], h: f64) {
        let n = f.len();
        let mut k = vec![0.0; n];
        transport_into(self.model, f, &mut k);
        let f1: Vec<f64> = (0..n).map(|i| f[i] + h * k[i]).collect();
        self.scratch.iter_mut().for_each(|v| *v = 0.0);
        transport_into(self.model, &f1, &mut self.scratch);
        for i in 0..n {
            f[i] = 0.5 * f[i] + 0.5 * (f1[i] + h * self.scratch[i]);
        }
    }

    fn collide(&self, f: &mut [f64]) {
        let g = self.model.grid;
        let nv = g.nv;
        let dt = self.dt;
        match self.model.kind {
            CollisionKind::Bgk => {
                let decay = (-dt).exp();
                let dv = g.dv();
                for i in 0..g.nx {
                    let col = &mut f[i * nv..(i + 1) * nv];
                    let rho = pairwise_sum_by(nv, |j| col[j]) * dv;
                    let mc = self.model.m.column(i);
                    for j in 0..nv {
                        col[j] = decay * col[j] + (1.0 - decay) * rho * mc[j];
                    }
                }
            }
            CollisionKind::Fp => {
                // Crank-Nicolson per column.
                let h = 0.5 * dt;
                for i in 0..g.nx {
                    let (lo, di, up) = &self.fp[i];
                    let col = &mut f[i * nv..(i + 1) * nv];
                    let mut rhs = vec![0.0; nv];
                    for j in 0..nv {
                        let mut s = di[j] * col[j];
                        if j > 0 {
                            s += lo[j] * col[j - 1];
                        }
                        if j + 1 < nv {
                            s += up[j] * col[j + 1];
                        }
                        rhs[j] = col[j] + h * s;
                    }
                    let l: Vec<f64> = lo.iter().map(|a| -h * a).collect();
                    let d: Vec<f64> = di.iter().map(|a| 1.0 - h * a).collect();
                    let u: Vec<f64> = up.iter().map(|a| -h * a).collect();
                    solve_tridiagonal(&l, &d, &u, &mut rhs);
                    col.copy_from_slice(&rhs);
                }
            }
        }
    }

    /// One Strang step: half transport, full collision, half transport.
    pub fn step_in_place(&mut self, f: &mut PhaseField) {
        let h = 0.5 * self.dt;
        self.transport(&mut f.values, h);
        self.collide(&mut f.values);
        self.transport(&mut f.values, h);
    }
}

/// One time step of size `dt`.
pub fn step(f: &PhaseField, model: &KineticModel, dt: f64) -> Result<PhaseField> {
    if !f.grid.same_shape(&model.grid) {
        return Err(HypoError::DimensionMismatch("field grid differs from model grid".into()));
    }
    let mut s = Stepper::new(model, dt)?;
    let mut out = f.clone();
    s.step_in_place(&mut out);
    Ok(out)
}

/// Snapshots and per-step scalars of one run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    /// Fields at every `stride`-th step, starting at step 0.
    pub snapshots: Vec<PhaseField>,
    pub stride: usize,
    pub mass: Vec<f64>,
    pub norm_sq: Vec<f64>,
    pub dissipation: Vec<f64>,
    pub total_dissipation: Vec<f64>,
    /// `|(N_{n+1} - N_n)/(2 dt) + (D_n + D_{n+1})/2|`, stored at `n + 1`; zero at 0.
    pub balance_defect: Vec<f64>,
    /// Total mass of the initial datum relative to its absolute mass.
    pub initial_mass_ratio: f64,
}

/// Snapshot stride used when none is requested.
pub fn default_stride(model: &KineticModel) -> usize {
    if model.grid.len() <= 1 << 16 {
        1
    } else {
        16
    }
}

/// Integrate from `f0` for `steps` steps of size `dt`.
pub fn evolve(
    f0: &PhaseField,
    model: &KineticModel,
    f_inf: &PhaseField,
    dt: f64,
    steps: usize,
    stride: usize,
) -> Result<Trajectory> {
    evolve_with(f0, model, f_inf, dt, steps, stride, |_, _| Ok(()))
}

/// As [`evolve`], handing every field (steps `0..=steps`) to `observe`.
pub fn evolve_with(
    f0: &PhaseField,
    model: &KineticModel,
    f_inf: &PhaseField,
    dt: f64,
    steps: usize,
    stride: usize,
    mut observe: impl FnMut(usize, &PhaseField) -> Result<()>,
) -> Result<Trajectory> {
    if !f0.is_finite() {
        return Err(HypoError::InvalidModel("initial datum is not finite".into()));
    }
    if !f0.grid.same_shape(&model.grid) {
        return Err(HypoError::DimensionMismatch("initial datum grid differs from model grid".into()));
    }
    let stride = stride.max(1);
    let mut stepper = Stepper::new(model, dt)?;
    let abs_mass: f64 = f0.values.iter().map(|v| v.abs()).sum::<f64>() * model.grid.cell_volume();
    let initial_mass_ratio = if abs_mass > 0.0 { f0.mass() / abs_mass } else { 0.0 };
    if initial_mass_ratio.abs() > 1e-12 {
        log::info!("initial datum carries mass ratio {initial_mass_ratio:e}");
    }
    let mut traj = Trajectory {
        dt,
        times: Vec::with_capacity(steps + 1),
        snapshots: Vec::new(),
        stride,
        mass: Vec::with_capacity(steps + 1),
        norm_sq: Vec::with_capacity(steps + 1),
        dissipation: Vec::with_capacity(steps + 1),
        total_dissipation: Vec::with_capacity(steps + 1),
        balance_defect: Vec::with_capacity(steps + 1),
        initial_mass_ratio,
    };
    let mut f = f0.clone();
    for n in 0..=steps {
        if n > 0 {
            stepper.step_in_place(&mut f);
        }
        let d = dissipation_breakdown(&f, model, f_inf)?;
        let norm = weighted_norm_sq(&f, f_inf)?;
        traj.times.push(n as f64 * dt);
        traj.mass.push(f.mass());
        traj.dissipation.push(d.velocity);
        traj.total_dissipation.push(d.total);
        let defect = if n == 0 {
            0.0
        } else {
            let prev_n = traj.norm_sq[n - 1];
            let prev_d = traj.total_dissipation[n - 1];
            ((norm - prev_n) / (2.0 * dt) + 0.5 * (prev_d + d.total)).abs()
        };
        traj.norm_sq.push(norm);
        traj.balance_defect.push(defect);
        observe(n, &f)?;
        if n % stride == 0 {
            traj.snapshots.push(f.clone());
        }
    }
    Ok(traj)
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn final_field(&self) -> Option<&PhaseField> {
        if self.steps().is_multiple_of(self.stride) {
            self.snapshots.last()
        } else {
            None
        }
    }

    pub fn max_balance_defect(&self) -> f64 {
        self.balance_defect.iter().fold(0.0f64, |a, &b| a.max(b))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,mass,norm_sq,dissipation,balance_defect\n");
        for n in 0..self.times.len() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt17(self.times[n]),
                fmt17(self.mass[n]),
                fmt17(self.norm_sq[n]),
                fmt17(self.dissipation[n]),
                fmt17(self.balance_defect[n])
            ));
        }
        s
    }
}
