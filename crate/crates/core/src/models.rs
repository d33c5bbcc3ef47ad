//! Background Maxwellian, external force and collision operators.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{HypoError, Result};
use crate::grid::{Grid, PhaseField, XBoundary};
use crate::numerics::pairwise_sum_by;

/// Smallest admissible background value; Gaussian tails are clamped here.
pub const M_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollisionKind {
    Fp,
    Bgk,
}

/// Spatial reconstruction used by the transport and force fluxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransportScheme {
    #[default]
    Upwind,
    /// Unlimited linear reconstruction (Fromm), second order on smooth data.
    SecondOrder,
}

/// Local temperature `T(x)` of the background Maxwellian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TemperatureProfile {
    Constant { value: f64 },
    Sinusoidal { mean: f64, amplitude: f64 },
    TwoBump { base: f64, amplitude: f64, centers: [f64; 2], width: f64 },
}

impl Default for TemperatureProfile {
    fn default() -> Self {
        Self::Sinusoidal { mean: 1.0, amplitude: 0.5 }
    }
}

impl TemperatureProfile {
    pub fn eval(&self, x: f64, grid: &Grid) -> f64 {
        match *self {
            Self::Constant { value } => value,
            Self::Sinusoidal { mean, amplitude } => mean + amplitude * (2.0 * PI * (x - grid.x_min) / grid.lx).sin(),
            Self::TwoBump { base, amplitude, centers, width } => {
                let bump = |c: f64| {
                    let mut d = x - c;
                    if grid.x_boundary == XBoundary::Periodic {
                        d -= grid.lx * (d / grid.lx).round();
                    }
                    (-(d / width).powi(2)).exp()
                };
                base + amplitude * (bump(centers[0]) + bump(centers[1]))
            }
        }
    }
}

/// Periodic potential used for gradient forces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Potential {
    /// `amplitude * cos(2 pi mode (x - x_min) / L_x)`.
    Cosine { amplitude: f64, mode: u32 },
}

impl Potential {
    pub fn eval(&self, x: f64, grid: &Grid) -> f64 {
        match *self {
            Self::Cosine { amplitude, mode } => {
                amplitude * (2.0 * PI * mode as f64 * (x - grid.x_min) / grid.lx).cos()
            }
        }
    }

    pub fn derivative(&self, x: f64, grid: &Grid) -> f64 {
        match *self {
            Self::Cosine { amplitude, mode } => {
                let k = 2.0 * PI * mode as f64 / grid.lx;
                -amplitude * k * (k * (x - grid.x_min)).sin()
            }
        }
    }
}

/// External force `G(x, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ForceProfile {
    #[default]
    Zero,
    Sinusoidal { amplitude: f64 },
    PotentialGradient { potential: Potential },
    /// `-x (1 + x^2)^{-(1 + delta)/2}`, switched off smoothly over `cutoff_width` before the walls.
    WeakDecay { delta: f64, cutoff_width: f64 },
}

impl ForceProfile {
    pub fn eval(&self, x: f64, _v: f64, grid: &Grid) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Sinusoidal { amplitude } => amplitude * (2.0 * PI * (x - grid.x_min) / grid.lx).sin(),
            Self::PotentialGradient { potential } => -potential.derivative(x, grid),
            Self::WeakDecay { delta, cutoff_width } => {
                let edge = grid.x_min.abs().max((grid.x_min + grid.lx).abs());
                let dist = edge - x.abs();
                let s = (dist / cutoff_width).clamp(0.0, 1.0);
                let cut = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
                -x * (1.0 + x * x).powf(-(1.0 + delta) / 2.0) * cut
            }
        }
    }
}

/// A conservative two-cell flux: `F = sum coef * f[cell]`, removed from `p`
/// and added to `q`, each scaled by `inv_h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Face {
    pub p: usize,
    pub q: usize,
    pub inv_h: f64,
    pub n: usize,
    pub cells: [usize; 3],
    pub coefs: [f64; 3],
}

impl Face {
    fn new(p: usize, q: usize, inv_h: f64, stencil: &[(usize, f64)]) -> Self {
        let mut cells = [0; 3];
        let mut coefs = [0.0; 3];
        for (k, &(c, w)) in stencil.iter().enumerate() {
            cells[k] = c;
            coefs[k] = w;
        }
        Self { p, q, inv_h, n: stencil.len(), cells, coefs }
    }

    #[inline]
    pub fn flux(&self, f: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.n {
            s += self.coefs[k] * f[self.cells[k]];
        }
        s
    }
}

pub(crate) fn apply_faces(faces: &[Face], f: &[f64], out: &mut [f64]) {
    for face in faces {
        let flux = face.flux(f) * face.inv_h;
        out[face.p] -= flux;
        out[face.q] += flux;
    }
}

pub(crate) fn apply_faces_transpose(faces: &[Face], g: &[f64], out: &mut [f64]) {
    for face in faces {
        let dg = (g[face.q] - g[face.p]) * face.inv_h;
        for k in 0..face.n {
            out[face.cells[k]] += face.coefs[k] * dg;
        }
    }
}

/// Immutable kinetic model on a fixed grid.
#[derive(Debug, Clone)]
pub struct KineticModel {
    pub grid: Grid,
    pub kind: CollisionKind,
    pub transport: TransportScheme,
    /// Background `M(x, v)`; each column sums to one under `dv` exactly.
    pub m: PhaseField,
    /// Force at cell centers.
    pub g: PhaseField,
    /// Force at velocity faces, `nx * (nv + 1)`; end faces are zero-flux.
    pub g_face: Vec<f64>,
    /// Arithmetic face mean of `M`, `nx * (nv + 1)`; zero at the ends.
    pub m_face: Vec<f64>,
    pub(crate) x_faces: Vec<Face>,
    pub(crate) v_faces: Vec<Face>,
    pub(crate) coll_faces: Vec<Face>,
}

impl KineticModel {
    /// Maxwellian background at temperature `T(x)` with force `G`.
    pub fn new(
        grid: Grid,
        kind: CollisionKind,
        temperature: &TemperatureProfile,
        force: &ForceProfile,
        transport: TransportScheme,
    ) -> Result<Self> {
        let m = PhaseField::from_fn(grid, |x, v| {
            let t = temperature.eval(x, &grid);
            (-v * v / (2.0 * t)).exp() / (2.0 * PI * t).sqrt()
        });
        for i in 0..grid.nx {
            let t = temperature.eval(grid.x(i), &grid);
            if !(t > 0.0) || !t.is_finite() {
                return Err(HypoError::InvalidModel(format!("temperature {t} at x-cell {i}")));
            }
        }
        let mut g_face = vec![0.0; grid.nx * (grid.nv + 1)];
        for i in 0..grid.nx {
            for j in 1..grid.nv {
                g_face[i * (grid.nv + 1) + j] = force.eval(grid.x(i), grid.v_face(j), &grid);
            }
        }
        let g = PhaseField::from_fn(grid, |x, v| force.eval(x, v, &grid));
        Self::from_fields(grid, kind, m, g, g_face, transport)
    }

    /// Build from explicit background and force data. `M` is floored and
    /// renormalized per column.
    pub fn from_fields(
        grid: Grid,
        kind: CollisionKind,
        mut m: PhaseField,
        g: PhaseField,
        g_face: Vec<f64>,
        transport: TransportScheme,
    ) -> Result<Self> {
        if !m.grid.same_shape(&grid) || !g.grid.same_shape(&grid) || g_face.len() != grid.nx * (grid.nv + 1) {
            return Err(HypoError::DimensionMismatch("model fields do not match grid".into()));
        }
        if !m.is_finite() || !g.is_finite() || g_face.iter().any(|v| !v.is_finite()) {
            return Err(HypoError::InvalidModel("non-finite background or force".into()));
        }
        if transport == TransportScheme::SecondOrder && grid.x_boundary != XBoundary::Periodic {
            return Err(HypoError::InvalidModel("second-order transport needs a periodic domain".into()));
        }
        let (nx, nv) = (grid.nx, grid.nv);
        for i in 0..nx {
            for j in 0..nv {
                let val = m.values[grid.idx(i, j)];
                if grid.in_unit_ball(j) && !(val > 0.0) {
                    return Err(HypoError::InvalidModel(format!("background not positive at ({i}, {j})")));
                }
            }
            let col = m.column_mut(i);
            for v in col.iter_mut() {
                *v = v.max(M_FLOOR);
            }
            let s = pairwise_sum_by(nv, |j| col[j]) * grid.dv();
            for v in col.iter_mut() {
                *v /= s;
            }
        }
        let mut m_face = vec![0.0; nx * (nv + 1)];
        for i in 0..nx {
            for j in 1..nv {
                m_face[i * (nv + 1) + j] = 0.5 * (m.at(i, j - 1) + m.at(i, j));
            }
        }
        let mut model = Self {
            grid,
            kind,
            transport,
            m,
            g,
            g_face,
            m_face,
            x_faces: Vec::new(),
            v_faces: Vec::new(),
            coll_faces: Vec::new(),
        };
        model.x_faces = model.build_x_faces();
        model.v_faces = model.build_v_faces();
        if kind == CollisionKind::Fp {
            model.coll_faces = model.build_fp_faces();
        }
        Ok(model)
    }

    #[inline]
    pub fn g_at_face(&self, i: usize, j: usize) -> f64 {
        self.g_face[i * (self.grid.nv + 1) + j]
    }

    #[inline]
    pub fn m_at_face(&self, i: usize, j: usize) -> f64 {
        self.m_face[i * (self.grid.nv + 1) + j]
    }

    pub fn max_abs_force(&self) -> f64 {
        self.g_face.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
    }

    /// Largest stable explicit step for the transport and force part.
    pub fn cfl_limit(&self) -> f64 {
        let g = self.grid;
        let gx = g.dx() / g.v_max;
        let gmax = self.max_abs_force();
        let gv = if gmax > 0.0 { g.dv() / gmax } else { f64::INFINITY };
        0.9 * gx.min(gv)
    }

    fn build_x_faces(&self) -> Vec<Face> {
        let g = self.grid;
        let (nx, nv) = (g.nx, g.nv);
        let inv = 1.0 / g.dx();
        let periodic = g.x_boundary == XBoundary::Periodic;
        let wrap = |i: isize| -> usize { i.rem_euclid(nx as isize) as usize };
        let mut faces = Vec::with_capacity(nx * nv + nv);
        let n_interior = if periodic { nx } else { nx - 1 };
        for i in 0..n_interior {
            let ip = wrap(i as isize + 1);
            for j in 0..nv {
                let v = g.v(j);
                let (p, q) = (g.idx(i, j), g.idx(ip, j));
                let face = match self.transport {
                    TransportScheme::Upwind => {
                        if v > 0.0 {
                            Face::new(p, q, inv, &[(p, v)])
                        } else {
                            Face::new(p, q, inv, &[(q, v)])
                        }
                    }
                    TransportScheme::SecondOrder => {
                        if v > 0.0 {
                            let im = g.idx(wrap(i as isize - 1), j);
                            Face::new(p, q, inv, &[(p, v), (q, 0.25 * v), (im, -0.25 * v)])
                        } else {
                            let ipp = g.idx(wrap(i as isize + 2), j);
                            Face::new(p, q, inv, &[(q, v), (ipp, -0.25 * v), (p, 0.25 * v)])
                        }
                    }
                };
                faces.push(face);
            }
        }
        if !periodic {
            // Outflow through a wall re-enters the same cell with mirrored velocity.
            for j in 0..nv {
                let v = g.v(j);
                let jr = nv - 1 - j;
                if v < 0.0 {
                    let (p, q) = (g.idx(0, j), g.idx(0, jr));
                    faces.push(Face::new(p, q, inv, &[(p, -v)]));
                } else {
                    let (p, q) = (g.idx(nx - 1, j), g.idx(nx - 1, jr));
                    faces.push(Face::new(p, q, inv, &[(p, v)]));
                }
            }
        }
        faces
    }

    fn build_v_faces(&self) -> Vec<Face> {
        let g = self.grid;
        let (nx, nv) = (g.nx, g.nv);
        let inv = 1.0 / g.dv();
        let mut faces = Vec::new();
        for i in 0..nx {
            for j in 1..nv {
                let gf = self.g_at_face(i, j);
                if gf == 0.0 {
                    continue;
                }
                let (p, q) = (g.idx(i, j - 1), g.idx(i, j));
                let second = self.transport == TransportScheme::SecondOrder;
                let face = if gf > 0.0 {
                    if second && j >= 2 {
                        let pm = g.idx(i, j - 2);
                        Face::new(p, q, inv, &[(p, gf), (q, 0.25 * gf), (pm, -0.25 * gf)])
                    } else {
                        Face::new(p, q, inv, &[(p, gf)])
                    }
                } else if second && j + 1 < nv {
                    let qp = g.idx(i, j + 1);
                    Face::new(p, q, inv, &[(q, gf), (qp, -0.25 * gf), (p, 0.25 * gf)])
                } else {
                    Face::new(p, q, inv, &[(q, gf)])
                };
                faces.push(face);
            }
        }
        faces
    }

    fn build_fp_faces(&self) -> Vec<Face> {
        let g = self.grid;
        let inv = 1.0 / g.dv();
        let mut faces = Vec::with_capacity(g.nx * g.nv);
        for i in 0..g.nx {
            for j in 1..g.nv {
                let (p, q) = (g.idx(i, j - 1), g.idx(i, j));
                let mf = self.m_at_face(i, j) * inv;
                // Outward flux p -> q is minus the diffusive flux M d(f/M)/dv.
                faces.push(Face::new(p, q, inv, &[(p, mf / self.m.values[p]), (q, -mf / self.m.values[q])]));
            }
        }
        faces
    }

    /// Tridiagonal coefficients of the FP operator on column `i`.
    pub fn fp_tridiagonal(&self, i: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let g = self.grid;
        let nv = g.nv;
        let h2 = 1.0 / (g.dv() * g.dv());
        let mut lower = vec![0.0; nv];
        let mut diag = vec![0.0; nv];
        let mut upper = vec![0.0; nv];
        for j in 0..nv {
            let mj = self.m.at(i, j);
            if j + 1 < nv {
                let a = self.m_at_face(i, j + 1) * h2;
                upper[j] = a / self.m.at(i, j + 1);
                diag[j] -= a / mj;
            }
            if j > 0 {
                let a = self.m_at_face(i, j) * h2;
                lower[j] = a / self.m.at(i, j - 1);
                diag[j] -= a / mj;
            }
        }
        (lower, diag, upper)
    }

    fn check(&self, f: &PhaseField) -> Result<()> {
        if !f.grid.same_shape(&self.grid) {
            return Err(HypoError::DimensionMismatch("field grid differs from model grid".into()));
        }
        Ok(())
    }
}

/// Discrete `d/dv (M d/dv (f/M))` with zero flux at the velocity ends.
pub fn coll_fp_apply(f: &PhaseField, model: &KineticModel) -> Result<PhaseField> {
    model.check(f)?;
    if model.kind != CollisionKind::Fp {
        return Err(HypoError::InvalidModel("model uses the BGK collision kernel".into()));
    }
    let mut out = PhaseField::zeros(f.grid);
    apply_faces(&model.coll_faces, &f.values, &mut out.values);
    Ok(out)
}

/// `<f> M - f`.
pub fn coll_bgk_apply(f: &PhaseField, model: &KineticModel) -> Result<PhaseField> {
    model.check(f)?;
    if model.kind != CollisionKind::Bgk {
        return Err(HypoError::InvalidModel("model uses the Fokker-Planck collision kernel".into()));
    }
    let mut out = PhaseField::zeros(f.grid);
    bgk_into(model, &f.values, &mut out.values, 1.0);
    Ok(out)
}

/// `out += scale * (<f> M - f)`.
pub(crate) fn bgk_into(model: &KineticModel, f: &[f64], out: &mut [f64], scale: f64) {
    let g = model.grid;
    let (nv, dv) = (g.nv, g.dv());
    for i in 0..g.nx {
        let col = &f[i * nv..(i + 1) * nv];
        let rho = pairwise_sum_by(nv, |j| col[j]) * dv;
        let mcol = model.m.column(i);
        for j in 0..nv {
            out[i * nv + j] += scale * (rho * mcol[j] - col[j]);
        }
    }
}

/// `out += L^T g`.
pub(crate) fn coll_transpose_into(model: &KineticModel, g: &[f64], out: &mut [f64]) {
    match model.kind {
        CollisionKind::Fp => apply_faces_transpose(&model.coll_faces, g, out),
        CollisionKind::Bgk => {
            let grid = model.grid;
            let (nv, dv) = (grid.nv, grid.dv());
            for i in 0..grid.nx {
                let mcol = model.m.column(i);
                let gcol = &g[i * nv..(i + 1) * nv];
                let s = pairwise_sum_by(nv, |j| mcol[j] * gcol[j]) * dv;
                for k in 0..nv {
                    out[i * nv + k] += s - gcol[k];
                }
            }
        }
    }
}

/// `out += L f`.
pub(crate) fn coll_into(model: &KineticModel, f: &[f64], out: &mut [f64]) {
    match model.kind {
        CollisionKind::Fp => apply_faces(&model.coll_faces, f, out),
        CollisionKind::Bgk => bgk_into(model, f, out, 1.0),
    }
}

/// Collision operator of either kind.
pub fn coll_apply(f: &PhaseField, model: &KineticModel) -> Result<PhaseField> {
    model.check(f)?;
    let mut out = PhaseField::zeros(f.grid);
    coll_into(model, &f.values, &mut out.values);
    Ok(out)
}

/// Adjoint of `L` in the `1/f_inf` weighted product: `f_inf * L^T (f / f_inf)`.
pub fn coll_adjoint_apply(f: &PhaseField, model: &KineticModel, f_inf: &PhaseField) -> Result<PhaseField> {
    model.check(f)?;
    model.check(f_inf)?;
    let p = ratio(f, f_inf)?;
    let mut out = vec![0.0; p.len()];
    coll_transpose_into(model, &p, &mut out);
    for (o, w) in out.iter_mut().zip(&f_inf.values) {
        *o *= w;
    }
    PhaseField::from_values(f.grid, out)
}

/// `f / f_inf`, with zero where both vanish.
pub(crate) fn ratio(f: &PhaseField, f_inf: &PhaseField) -> Result<Vec<f64>> {
    let g = f.grid;
    f.values
        .iter()
        .zip(&f_inf.values)
        .enumerate()
        .map(|(k, (&a, &w))| {
            if w >= crate::grid::WEIGHT_FLOOR {
                Ok(a / w)
            } else if a == 0.0 {
                Ok(0.0)
            } else {
                Err(HypoError::DegenerateWeight { x_cell: k / g.nv, v_cell: k % g.nv, value: w })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::local_density;

    fn model(kind: CollisionKind, nx: usize, nv: usize) -> KineticModel {
        let grid = Grid::new(nx, 1.0, nv, 6.0, 1e-3, 1.0).unwrap();
        KineticModel::new(grid, kind, &TemperatureProfile::default(), &ForceProfile::Zero, TransportScheme::Upwind)
            .unwrap()
    }

    fn rough(grid: Grid, seed: f64) -> PhaseField {
        PhaseField::from_fn(grid, |x, v| (x * 37.0 + seed).sin() * (v * 5.3 - seed).cos() + 0.3 * (v * v).sin())
    }

    #[test]
    fn background_columns_are_normalized() {
        let m = model(CollisionKind::Bgk, 8, 32);
        for rho in local_density(&m.m).values {
            assert!((rho - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn fp_annihilates_background_exactly() {
        let m = model(CollisionKind::Fp, 8, 32);
        let out = coll_fp_apply(&m.m, &m).unwrap();
        let scale = m.m.values.iter().fold(0.0f64, |a, b| a.max(*b)) / m.grid.dv().powi(2);
        assert!(out.values.iter().all(|v| v.abs() <= 1e-14 * scale));
    }

    #[test]
    fn bgk_local_equilibria_are_kernel() {
        let m = model(CollisionKind::Bgk, 8, 32);
        let mut f = m.m.clone();
        for i in 0..8 {
            let c = 1.0 + i as f64;
            f.column_mut(i).iter_mut().for_each(|v| *v *= c);
        }
        let out = coll_bgk_apply(&f, &m).unwrap();
        assert!(out.values.iter().all(|v| v.abs() < 1e-14));
        assert!(coll_bgk_apply(&PhaseField::zeros(m.grid), &m).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collisions_conserve_column_mass() {
        for kind in [CollisionKind::Fp, CollisionKind::Bgk] {
            let m = model(kind, 6, 24);
            let f = rough(m.grid, 0.4);
            let out = coll_apply(&f, &m).unwrap();
            for rho in local_density(&out).values {
                assert!(rho.abs() < 1e-12, "{kind:?}: {rho}");
            }
        }
    }

    // Independently assembled dense FP matrix on one column.
    fn fp_dense_column(m: &KineticModel, i: usize) -> Vec<Vec<f64>> {
        let nv = m.grid.nv;
        let dv = m.grid.dv();
        let mm: Vec<f64> = (0..nv).map(|j| m.m.at(i, j)).collect();
        let mut a = vec![vec![0.0; nv]; nv];
        for j in 0..nv - 1 {
            let mf = 0.5 * (mm[j] + mm[j + 1]);
            // flux = mf * (f_{j+1}/M_{j+1} - f_j/M_j) / dv, entering j and leaving j+1
            a[j][j + 1] += mf / mm[j + 1] / (dv * dv);
            a[j][j] -= mf / mm[j] / (dv * dv);
            a[j + 1][j + 1] -= mf / mm[j + 1] / (dv * dv);
            a[j + 1][j] += mf / mm[j] / (dv * dv);
        }
        a
    }

    #[test]
    fn fp_matches_dense_oracle() {
        let m = model(CollisionKind::Fp, 3, 16);
        let f = rough(m.grid, 1.1);
        let out = coll_fp_apply(&f, &m).unwrap();
        for i in 0..3 {
            let a = fp_dense_column(&m, i);
            let col = f.column(i);
            for j in 0..16 {
                let e: f64 = (0..16).map(|k| a[j][k] * col[k]).sum();
                let got = out.at(i, j);
                assert!((got - e).abs() <= 1e-12 * e.abs().max(1.0), "{got} vs {e}");
            }
            let (lo, di, up) = m.fp_tridiagonal(i);
            for j in 0..16 {
                assert!((di[j] - a[j][j]).abs() <= 1e-12 * di[j].abs());
                if j > 0 {
                    assert!((lo[j] - a[j][j - 1]).abs() <= 1e-12 * lo[j].abs());
                }
                if j + 1 < 16 {
                    assert!((up[j] - a[j][j + 1]).abs() <= 1e-12 * up[j].abs());
                }
            }
        }
    }

    #[test]
    fn bgk_matches_per_cell_formula() {
        let m = model(CollisionKind::Bgk, 4, 16);
        let f = PhaseField::from_fn(m.grid, |x, v| if (v - 0.5).abs() < 1.0 { 1.0 + x } else { 0.0 });
        let out = coll_bgk_apply(&f, &m).unwrap();
        let dv = m.grid.dv();
        for i in 0..4 {
            let mut rho = 0.0;
            for j in 0..16 {
                rho += f.at(i, j) * dv;
            }
            for j in 0..16 {
                // dense row: L_jk = M_j dv - delta_jk
                let mut e = 0.0;
                for k in 0..16 {
                    let l = m.m.at(i, j) * dv - if j == k { 1.0 } else { 0.0 };
                    e += l * f.at(i, k);
                }
                assert!((out.at(i, j) - e).abs() <= 1e-12 * e.abs().max(1.0));
                assert!((out.at(i, j) - (rho * m.m.at(i, j) - f.at(i, j))).abs() <= 1e-13);
            }
        }
    }

    #[test]
    fn adjoint_is_weighted_transpose() {
        for kind in [CollisionKind::Fp, CollisionKind::Bgk] {
            let m = model(kind, 5, 16);
            let finf = PhaseField::from_fn(m.grid, |x, v| (1.0 + 0.3 * (6.0 * x).sin()) * (-v * v / 2.2).exp());
            for s in 0..100 {
                let f = rough(m.grid, s as f64 * 0.37);
                let h = rough(m.grid, 10.0 + s as f64 * 0.11);
                let lf = coll_apply(&f, &m).unwrap();
                let lsh = coll_adjoint_apply(&h, &m, &finf).unwrap();
                let a = crate::grid::weighted_inner(&lf, &h, &finf).unwrap();
                let b = crate::grid::weighted_inner(&f, &lsh, &finf).unwrap();
                let scale = crate::grid::weighted_norm_sq(&lf, &finf).unwrap().sqrt()
                    * crate::grid::weighted_norm_sq(&h, &finf).unwrap().sqrt();
                assert!((a - b).abs() <= 1e-12 * scale.max(a.abs()), "{kind:?} {a} {b}");
            }
        }
    }

    #[test]
    fn bgk_adjoint_fixes_stationary_weight() {
        let m = model(CollisionKind::Bgk, 4, 16);
        let finf = PhaseField::from_fn(m.grid, |x, v| (2.0 + x.sin()) * (-v * v).exp());
        let out = coll_adjoint_apply(&finf, &m, &finf).unwrap();
        assert!(out.values.iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn fp_self_adjoint_when_weight_is_background() {
        let grid = Grid::new(4, 1.0, 16, 6.0, 1e-3, 1.0).unwrap();
        let m = KineticModel::new(
            grid,
            CollisionKind::Fp,
            &TemperatureProfile::Constant { value: 1.0 },
            &ForceProfile::Zero,
            TransportScheme::Upwind,
        )
        .unwrap();
        let finf = m.m.clone();
        for s in 0..5 {
            let f = rough(grid, s as f64);
            let a = coll_apply(&f, &m).unwrap();
            let b = coll_adjoint_apply(&f, &m, &finf).unwrap();
            let scale = a.values.iter().fold(0.0f64, |x, y| x.max(y.abs()));
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn fp_adjoint_matches_continuous_formula_to_first_order() {
        // L* f = (f_inf/M) d/dv (M d/dv (f/f_inf)) for smooth data.
        let err = |nv: usize| {
            let grid = Grid::new(3, 1.0, nv, 6.0, 1e-3, 1.0).unwrap();
            let m = KineticModel::new(
                grid,
                CollisionKind::Fp,
                &TemperatureProfile::Constant { value: 1.0 },
                &ForceProfile::Zero,
                TransportScheme::Upwind,
            )
            .unwrap();
            // f_inf = M (1 + 0.2 v^2 e^{-v^2/4}), f = f_inf q with q = sin v.
            let a = |v: f64| 1.0 + 0.2 * v * v * (-v * v / 4.0).exp();
            let gauss = |v: f64| (-v * v / 2.0).exp() / (2.0 * PI).sqrt();
            let finf = PhaseField::from_fn(grid, |_, v| gauss(v) * a(v));
            let f = PhaseField::from_fn(grid, |_, v| gauss(v) * a(v) * v.sin());
            let got = coll_adjoint_apply(&f, &m, &finf).unwrap();
            // (a) (M q')' = M (q'' - v q') = M (-sin v - v cos v)
            let mut e = 0.0f64;
            for j in 0..nv {
                let v = grid.v(j);
                if v.abs() > 3.0 {
                    continue;
                }
                let exact = a(v) * gauss(v) * (-v.sin() - v * v.cos());
                e = e.max((got.at(1, j) - exact).abs());
            }
            e
        };
        let (e1, e2) = (err(64), err(128));
        assert!(e2 < e1 / 1.8, "{e1} {e2}");
    }
}
