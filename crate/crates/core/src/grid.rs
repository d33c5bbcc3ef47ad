//! Phase-space discretization: uniform cell-centered grids in `x` and `v`,
//! midpoint quadrature, and the stationary-state weighted norms.
//!
//! Fields are stored row-major with the velocity index fastest, so a
//! velocity column at fixed `x` is a contiguous slice.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HypoError, Result};
use crate::numerics::pairwise_sum_by;

/// Floor below which the stationary state is treated as zero in weights.
pub const WEIGHT_FLOOR: f64 = 1e-30;

/// Number of space (and velocity) dimensions supported.
pub const DIM: usize = 1;

/// Treatment of the spatial boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum XBoundary {
    /// Torus of length `lx`.
    #[default]
    Periodic,
    /// Box with specularly reflecting walls: outgoing flux re-enters with `v -> -v`.
    Specular,
}

/// Tensor-product phase-space grid plus the time step and certificate window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub nv: usize,
    pub x_min: f64,
    pub lx: f64,
    pub v_max: f64,
    pub dt: f64,
    pub t_window: f64,
    pub x_boundary: XBoundary,
}

impl Grid {
    pub fn new(nx: usize, lx: f64, nv: usize, v_max: f64, dt: f64, t_window: f64) -> Result<Self> {
        Self::with_boundary(nx, 0.0, lx, nv, v_max, dt, t_window, XBoundary::Periodic)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_boundary(
        nx: usize,
        x_min: f64,
        lx: f64,
        nv: usize,
        v_max: f64,
        dt: f64,
        t_window: f64,
        x_boundary: XBoundary,
    ) -> Result<Self> {
        if nx < 3 || nv < 2 {
            return Err(HypoError::InvalidGrid(format!("need nx >= 3 and nv >= 2, got {nx}x{nv}")));
        }
        if !(lx > 0.0) || !lx.is_finite() {
            return Err(HypoError::InvalidGrid(format!("spatial length must be positive, got {lx}")));
        }
        if !(v_max >= 2.0) || !v_max.is_finite() {
            return Err(HypoError::InvalidGrid(format!("v_max must be at least 2, got {v_max}")));
        }
        if !(dt > 0.0) || !(t_window > 0.0) {
            return Err(HypoError::InvalidGrid(format!("dt and window must be positive ({dt}, {t_window})")));
        }
        Ok(Self { nx, nv, x_min, lx, v_max, dt, t_window, x_boundary })
    }

    pub fn dim(&self) -> usize {
        DIM
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dv(&self) -> f64 {
        2.0 * self.v_max / self.nv as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx() * self.dv()
    }

    pub fn len(&self) -> usize {
        self.nx * self.nv
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.nv + j
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }

    pub fn v(&self, j: usize) -> f64 {
        -self.v_max + (j as f64 + 0.5) * self.dv()
    }

    /// Velocity at the face between cells `j-1` and `j` (`j = 0..=nv`).
    pub fn v_face(&self, j: usize) -> f64 {
        -self.v_max + j as f64 * self.dv()
    }

    /// Velocity cells realizing the unit ball `|v| <= 1`.
    pub fn in_unit_ball(&self, j: usize) -> bool {
        self.v(j).abs() <= 1.0
    }

    /// Number of time steps spanning one certificate window.
    pub fn steps_per_window(&self) -> usize {
        (self.t_window / self.dt).round() as usize
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.nx == other.nx && self.nv == other.nv
    }

    /// Halve every mesh width `k` times, including the time step.
    pub fn refined(&self, k: u32) -> Self {
        let f = 1usize << k;
        Self { nx: self.nx * f, nv: self.nv * f, dt: self.dt / f as f64, ..*self }
    }

    pub fn with_dt(&self, dt: f64) -> Self {
        Self { dt, ..*self }
    }

    pub fn x_weights_sum(&self) -> f64 {
        pairwise_sum_by(self.nx, |_| self.dx())
    }

    pub fn v_weights_sum(&self) -> f64 {
        pairwise_sum_by(self.nv, |_| self.dv())
    }
}

/// A function on the phase-space grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl PhaseField {
    pub fn zeros(grid: Grid) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..grid.nx {
            let x = grid.x(i);
            for j in 0..grid.nv {
                values.push(f(x, grid.v(j)));
            }
        }
        Self { grid, values }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(HypoError::DimensionMismatch(format!(
                "{} values for a {}x{} grid",
                values.len(),
                grid.nx,
                grid.nv
            )));
        }
        Ok(Self { grid, values })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.values[i * self.grid.nv..(i + 1) * self.grid.nv]
    }

    pub fn column_mut(&mut self, i: usize) -> &mut [f64] {
        let nv = self.grid.nv;
        &mut self.values[i * nv..(i + 1) * nv]
    }

    pub fn mass(&self) -> f64 {
        pairwise_sum_by(self.values.len(), |k| self.values[k]) * self.grid.cell_volume()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    /// `self + c * other`.
    pub fn axpy(&mut self, c: f64, other: &PhaseField) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    pub fn check_grid(&self, other: &PhaseField) -> Result<()> {
        if !self.grid.same_shape(&other.grid) {
            return Err(HypoError::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.grid.nx, self.grid.nv, other.grid.nx, other.grid.nv
            )));
        }
        Ok(())
    }
}

/// A function of `x` alone (one value per spatial cell).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl SpatialField {
    pub fn integral(&self) -> f64 {
        pairwise_sum_by(self.values.len(), |i| self.values[i]) * self.grid.dx()
    }
}

/// Velocity integral per spatial cell.
pub fn local_density(f: &PhaseField) -> SpatialField {
    let g = f.grid;
    let dv = g.dv();
    let values = (0..g.nx)
        .map(|i| {
            let col = f.column(i);
            pairwise_sum_by(g.nv, |j| col[j]) * dv
        })
        .collect();
    SpatialField { grid: g, values }
}

/// `sum f^2 / f_inf dx dv`.
pub fn weighted_norm_sq(f: &PhaseField, f_inf: &PhaseField) -> Result<f64> {
    weighted_inner(f, f, f_inf)
}

/// `sum f g / f_inf dx dv`.
pub fn weighted_inner(f: &PhaseField, g: &PhaseField, f_inf: &PhaseField) -> Result<f64> {
    f.check_grid(f_inf)?;
    g.check_grid(f_inf)?;
    let grid = f.grid;
    for k in 0..f.values.len() {
        let w = f_inf.values[k];
        if w < WEIGHT_FLOOR && (f.values[k] != 0.0 || g.values[k] != 0.0) {
            return Err(HypoError::DegenerateWeight { x_cell: k / grid.nv, v_cell: k % grid.nv, value: w });
        }
    }
    let s = pairwise_sum_by(f.values.len(), |k| {
        let a = f.values[k];
        let b = g.values[k];
        if a == 0.0 || b == 0.0 {
            0.0
        } else {
            a * b / f_inf.values[k]
        }
    });
    Ok(s * grid.cell_volume())
}

/// Time-trapezoid integral of the weighted norm over equally spaced slices.
pub fn weighted_norm_sq_spacetime(traj: &[PhaseField], f_inf: &PhaseField, dt: f64) -> Result<f64> {
    let norms = traj.iter().map(|f| weighted_norm_sq(f, f_inf)).collect::<Result<Vec<_>>>()?;
    Ok(trapezoid(&norms, dt))
}

pub fn trapezoid(values: &[f64], dt: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => {
            let inner = pairwise_sum_by(n - 2, |k| values[k + 1]);
            dt * (0.5 * values[0] + inner + 0.5 * values[n - 1])
        }
    }
}

const MAGIC: &[u8; 8] = b"HYPOFLD\0";
const FORMAT_VERSION: u64 = 1;

/// Header of the flat binary snapshot format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotHeader {
    pub nx: u64,
    pub nv: u64,
    pub lx: f64,
    pub v_max: f64,
}

/// Write `magic, version, N_x, N_v, L_x, V_max` (little endian) followed by
/// the row-major values.
pub fn write_snapshot(w: &mut impl Write, header: SnapshotHeader, values: &[f64]) -> Result<()> {
    if values.len() as u64 != header.nx * header.nv {
        return Err(HypoError::DimensionMismatch("snapshot header does not match data".into()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&header.nx.to_le_bytes())?;
    w.write_all(&header.nv.to_le_bytes())?;
    w.write_all(&header.lx.to_le_bytes())?;
    w.write_all(&header.v_max.to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot(r: &mut impl Read) -> Result<(SnapshotHeader, Vec<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(HypoError::Format("bad magic".into()));
    }
    let mut b = [0u8; 8];
    let mut next = |r: &mut dyn Read| -> Result<[u8; 8]> {
        r.read_exact(&mut b)?;
        Ok(b)
    };
    let version = u64::from_le_bytes(next(r)?);
    if version != FORMAT_VERSION {
        return Err(HypoError::Format(format!("unsupported version {version}")));
    }
    let nx = u64::from_le_bytes(next(r)?);
    let nv = u64::from_le_bytes(next(r)?);
    let lx = f64::from_le_bytes(next(r)?);
    let v_max = f64::from_le_bytes(next(r)?);
    let n = nx.checked_mul(nv).ok_or_else(|| HypoError::Format("header overflow".into()))? as usize;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(f64::from_le_bytes(next(r)?));
    }
    Ok((SnapshotHeader { nx, nv, lx, v_max }, values))
}

impl PhaseField {
    pub fn header(&self) -> SnapshotHeader {
        SnapshotHeader { nx: self.grid.nx as u64, nv: self.grid.nv as u64, lx: self.grid.lx, v_max: self.grid.v_max }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_snapshot(&mut w, self.header(), &self.values)?;
        w.flush()?;
        Ok(())
    }

    /// Load a snapshot onto `grid`, which must match the header.
    pub fn load(path: &Path, grid: Grid) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let (h, values) = read_snapshot(&mut r)?;
        if h.nx as usize != grid.nx || h.nv as usize != grid.nv || h.lx != grid.lx || h.v_max != grid.v_max {
            return Err(HypoError::DimensionMismatch("snapshot header does not match grid".into()));
        }
        PhaseField::from_values(grid, values)
    }

    /// One row per cell: `x,v,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,v,value\n");
        for i in 0..self.grid.nx {
            for j in 0..self.grid.nv {
                s.push_str(&format!("{},{},{}\n", fmt17(self.grid.x(i)), fmt17(self.grid.v(j)), fmt17(self.at(i, j))));
            }
        }
        s
    }
}

/// Full-precision decimal (17 significant digits).
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(nx: usize, nv: usize) -> Grid {
        Grid::new(nx, 1.0, nv, 6.0, 1e-3, 1.0).unwrap()
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Grid::new(8, 0.0, 8, 6.0, 1e-3, 1.0).is_err());
        assert!(Grid::new(8, 1.0, 8, 1.5, 1e-3, 1.0).is_err());
        assert!(Grid::new(8, 1.0, 8, 6.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn quadrature_weights_sum_exactly() {
        let g = Grid::new(64, 2.0, 32, 4.0, 1e-3, 1.0).unwrap();
        assert_eq!(g.x_weights_sum(), 2.0);
        assert_eq!(g.v_weights_sum(), 8.0);
        let one = PhaseField::from_fn(g, |_, _| 1.0);
        assert_eq!(one.mass(), 16.0);
    }

    #[test]
    fn density_of_zero_and_constant() {
        let g = grid(8, 16);
        assert!(local_density(&PhaseField::zeros(g)).values.iter().all(|&v| v == 0.0));
        let d = local_density(&PhaseField::from_fn(g, |_, _| 1.0));
        assert!(d.values.iter().all(|&v| (v - 12.0).abs() < 1e-13));
    }

    #[test]
    fn gaussian_density_matches_fine_quadrature() {
        let g = Grid::new(4, 1.0, 64, 6.0, 1e-3, 1.0).unwrap();
        let gauss = |v: f64| (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let f = PhaseField::from_fn(g, |_, v| gauss(v));
        // Oracle: composite Simpson on 200001 points over [-6, 6].
        let n = 200_000;
        let h = 12.0 / n as f64;
        let mut s = gauss(-6.0) + gauss(6.0);
        for k in 1..n {
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * gauss(-6.0 + k as f64 * h);
        }
        let oracle = s * h / 3.0;
        for rho in local_density(&f).values {
            assert!((rho - oracle).abs() <= 1e-8, "{rho} vs {oracle}");
            assert!((rho - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn weighted_norm_identities() {
        let g = grid(16, 16);
        let mass = 1.0 / (g.lx * 2.0 * g.v_max);
        let finf = PhaseField::from_fn(g, |_, _| mass);
        assert_eq!(weighted_norm_sq(&PhaseField::zeros(g), &finf).unwrap(), 0.0);
        assert!((weighted_norm_sq(&finf, &finf).unwrap() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn weighted_norm_matches_dense_quadratic_form() {
        let g = grid(16, 16);
        let finf = PhaseField::from_fn(g, |x, v| 0.1 + (x * 3.0).sin().abs() + (-v * v).exp());
        let f = PhaseField::from_fn(g, |x, v| (17.0 * x + 3.0 * v).sin() * (1.0 + v.cos()));
        let n = g.len();
        // Oracle: x^T W x with an explicitly assembled dense diagonal W.
        let mut wmat = vec![0.0; n * n];
        for k in 0..n {
            wmat[k * n + k] = g.cell_volume() / finf.values[k];
        }
        let mut q = 0.0;
        for a in 0..n {
            for b in 0..n {
                q += f.values[a] * wmat[a * n + b] * f.values[b];
            }
        }
        let got = weighted_norm_sq(&f, &finf).unwrap();
        assert!(((got - q) / q).abs() <= 1e-12);
    }

    #[test]
    fn degenerate_weight_is_reported() {
        let g = grid(4, 4);
        let mut finf = PhaseField::from_fn(g, |_, _| 1.0);
        finf.values[5] = 1e-31;
        let f = PhaseField::from_fn(g, |_, _| 1.0);
        match weighted_norm_sq(&f, &finf) {
            Err(HypoError::DegenerateWeight { x_cell: 1, v_cell: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let mut f0 = f.clone();
        f0.values[5] = 0.0;
        assert!(weighted_norm_sq(&f0, &finf).is_ok());
    }

    #[test]
    fn spacetime_norm_trapezoid() {
        let g = grid(4, 4);
        let finf = PhaseField::from_fn(g, |_, _| 0.5);
        let f = PhaseField::from_fn(g, |x, v| x + v);
        let n0 = weighted_norm_sq(&f, &finf).unwrap();
        let traj = vec![f.clone(); 11];
        let got = weighted_norm_sq_spacetime(&traj, &finf, 0.1).unwrap();
        assert!((got - n0).abs() <= 1e-12 * n0);
        assert_eq!(weighted_norm_sq_spacetime(&vec![PhaseField::zeros(g); 5], &finf, 0.1).unwrap(), 0.0);
        // Norm profile linear in time: slices sqrt(1 + t) * f.
        let traj: Vec<_> = (0..=10)
            .map(|k| {
                let mut s = f.clone();
                s.scale((1.0 + 0.1 * k as f64).sqrt());
                s
            })
            .collect();
        let got = weighted_norm_sq_spacetime(&traj, &finf, 0.1).unwrap();
        // Trapezoid is exact on linear profiles: int_0^1 (1+t) dt = 1.5.
        assert!((got - 1.5 * n0).abs() <= 1e-12 * n0);
    }

    #[test]
    fn snapshot_roundtrip_and_header_layout() {
        let g = grid(3, 4);
        let f = PhaseField::from_fn(g, |x, v| x * 10.0 + v);
        let mut buf = Vec::new();
        write_snapshot(&mut buf, f.header(), &f.values).unwrap();
        assert_eq!(buf.len(), 48 + 8 * 12);
        assert_eq!(&buf[..8], b"HYPOFLD\0");
        assert_eq!(u64::from_le_bytes(buf[16..24].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(buf[40..48].try_into().unwrap()), 6.0);
        let (h, vals) = read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(h, f.header());
        assert_eq!(vals, f.values);
        let csv = f.to_csv();
        assert_eq!(csv.lines().count(), 13);
    }

    proptest::proptest! {
        #[test]
        fn density_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, s in 0u64..1000) {
            let g = grid(5, 8);
            let p = s as f64 * 0.01;
            let f = PhaseField::from_fn(g, |x, v| (x * 7.0 + v + p).sin());
            let h = PhaseField::from_fn(g, |x, v| (x - v * p).cos());
            let mut c = f.clone();
            c.scale(a);
            c.axpy(b, &h);
            let dc = local_density(&c);
            let (df, dh) = (local_density(&f), local_density(&h));
            for i in 0..g.nx {
                let e = a * df.values[i] + b * dh.values[i];
                proptest::prop_assert!((dc.values[i] - e).abs() <= 1e-12);
            }
        }

        #[test]
        fn weighted_norm_positive_definite(s in 0u64..10_000) {
            let g = grid(6, 6);
            let finf = PhaseField::from_fn(g, |x, v| 1.0 + 0.5 * (x + v).sin());
            let p = s as f64 * 1e-3;
            let f = PhaseField::from_fn(g, |x, v| ((x + p) * 13.0).sin() * (v * p + 1.0).cos());
            let n = weighted_norm_sq(&f, &finf).unwrap();
            let nonzero = f.values.iter().any(|&v| v != 0.0);
            proptest::prop_assert!(n >= 0.0);
            proptest::prop_assert_eq!(n > 0.0, nonzero);
        }
    }
}
