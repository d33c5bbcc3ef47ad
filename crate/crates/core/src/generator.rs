//! The full generator `A = -v d/dx - d/dv(G .) + L`, its weighted adjoint
//! and the symmetric/antisymmetric split, matrix-free and assembled.

use nalgebra::DMatrix;

use crate::error::{HypoError, Result};
use crate::grid::{weighted_norm_sq, PhaseField};
use crate::models::{apply_faces, apply_faces_transpose, coll_into, coll_transpose_into, ratio, CollisionKind, KineticModel};

/// Largest state count accepted for dense assembly.
pub const DENSE_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    A,
    AStar,
    ASym,
    AAnti,
    L,
    LStar,
}

impl GeneratorKind {
    fn needs_weight(self) -> bool {
        !matches!(self, Self::A | Self::L)
    }
}

/// `out += T f` with `T` the transport and force part.
pub(crate) fn transport_into(model: &KineticModel, f: &[f64], out: &mut [f64]) {
    apply_faces(&model.x_faces, f, out);
    apply_faces(&model.v_faces, f, out);
}

pub(crate) fn transport_transpose_into(model: &KineticModel, g: &[f64], out: &mut [f64]) {
    apply_faces_transpose(&model.x_faces, g, out);
    apply_faces_transpose(&model.v_faces, g, out);
}

fn check(model: &KineticModel, f: &PhaseField) -> Result<()> {
    if !f.grid.same_shape(&model.grid) {
        return Err(HypoError::DimensionMismatch(format!(
            "field is {}x{}, model is {}x{}",
            f.grid.nx, f.grid.nv, model.grid.nx, model.grid.nv
        )));
    }
    Ok(())
}

pub fn generator_apply(f: &PhaseField, model: &KineticModel) -> Result<PhaseField> {
    check(model, f)?;
    let mut out = PhaseField::zeros(model.grid);
    transport_into(model, &f.values, &mut out.values);
    coll_into(model, &f.values, &mut out.values);
    Ok(out)
}

/// Transport and force part only.
pub fn transport_apply(f: &PhaseField, model: &KineticModel) -> Result<PhaseField> {
    check(model, f)?;
    let mut out = PhaseField::zeros(model.grid);
    transport_into(model, &f.values, &mut out.values);
    Ok(out)
}

/// `A* f = f_inf * A^T (f / f_inf)`.
pub fn generator_adjoint_apply(f: &PhaseField, model: &KineticModel, f_inf: &PhaseField) -> Result<PhaseField> {
    check(model, f)?;
    check(model, f_inf)?;
    let p = ratio(f, f_inf)?;
    let mut out = vec![0.0; p.len()];
    transport_transpose_into(model, &p, &mut out);
    coll_transpose_into(model, &p, &mut out);
    for (o, w) in out.iter_mut().zip(&f_inf.values) {
        *o *= w;
    }
    PhaseField::from_values(model.grid, out)
}

/// Any of the six operators applied matrix-free.
pub fn operator_apply(
    kind: GeneratorKind,
    f: &PhaseField,
    model: &KineticModel,
    f_inf: Option<&PhaseField>,
) -> Result<PhaseField> {
    let weight = || f_inf.ok_or_else(|| HypoError::InvalidModel("adjoint operators need a stationary weight".into()));
    match kind {
        GeneratorKind::A => generator_apply(f, model),
        GeneratorKind::L => crate::models::coll_apply(f, model),
        GeneratorKind::AStar => generator_adjoint_apply(f, model, weight()?),
        GeneratorKind::LStar => crate::models::coll_adjoint_apply(f, model, weight()?),
        GeneratorKind::ASym | GeneratorKind::AAnti => {
            let a = generator_apply(f, model)?;
            let b = generator_adjoint_apply(f, model, weight()?)?;
            let s = if kind == GeneratorKind::ASym { 1.0 } else { -1.0 };
            let values = a.values.iter().zip(&b.values).map(|(x, y)| 0.5 * (x + s * y)).collect();
            PhaseField::from_values(model.grid, values)
        }
    }
}

/// Compressed-row matrix over the flattened `(x, v)` index.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    pub kind: GeneratorKind,
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub val: Vec<f64>,
}

impl GeneratorMatrix {
    fn from_triplets(kind: GeneratorKind, n: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0; n + 1];
        let mut col = Vec::with_capacity(t.len());
        let mut val: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *val.last_mut().unwrap() += v;
            } else {
                col.push(c);
                val.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { kind, n, row_ptr, col, val }
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (self.col[k], self.val[k]))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).filter(|&(cc, _)| cc == c).map(|(_, v)| v).sum()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|r| self.row(r).map(|(c, v)| v * x[c]).sum()).collect()
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n).flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v))).collect()
    }

    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        if self.n > DENSE_LIMIT {
            return Err(HypoError::TooLarge(self.n));
        }
        let mut d = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                d[(r, c)] += v;
            }
        }
        Ok(d)
    }
}

fn face_triplets(faces: &[crate::models::Face], t: &mut Vec<(usize, usize, f64)>) {
    for f in faces {
        for k in 0..f.n {
            let w = f.coefs[k] * f.inv_h;
            t.push((f.p, f.cells[k], -w));
            t.push((f.q, f.cells[k], w));
        }
    }
}

fn collision_triplets(model: &KineticModel, t: &mut Vec<(usize, usize, f64)>) {
    match model.kind {
        CollisionKind::Fp => face_triplets(&model.coll_faces, t),
        CollisionKind::Bgk => {
            let g = model.grid;
            let dv = g.dv();
            for i in 0..g.nx {
                for j in 0..g.nv {
                    let r = g.idx(i, j);
                    for k in 0..g.nv {
                        t.push((r, g.idx(i, k), model.m.at(i, j) * dv));
                    }
                    t.push((r, r, -1.0));
                }
            }
        }
    }
}

/// Assemble one of the six operators. Adjoint kinds need `f_inf`.
pub fn assemble_generator(model: &KineticModel, kind: GeneratorKind, f_inf: Option<&PhaseField>) -> Result<GeneratorMatrix> {
    let n = model.grid.len();
    let mut a = Vec::new();
    if matches!(kind, GeneratorKind::L | GeneratorKind::LStar) {
        collision_triplets(model, &mut a);
    } else {
        face_triplets(&model.x_faces, &mut a);
        face_triplets(&model.v_faces, &mut a);
        collision_triplets(model, &mut a);
    }
    if !kind.needs_weight() {
        return Ok(GeneratorMatrix::from_triplets(kind, n, a));
    }
    let w = f_inf.ok_or_else(|| HypoError::InvalidModel("adjoint operators need a stationary weight".into()))?;
    check(model, w)?;
    for (k, &v) in w.values.iter().enumerate() {
        if v < crate::grid::WEIGHT_FLOOR {
            let nv = model.grid.nv;
            return Err(HypoError::DegenerateWeight { x_cell: k / nv, v_cell: k % nv, value: v });
        }
    }
    // (A*)_{ik} = f_inf_i A_{ki} / f_inf_k
    let star: Vec<_> = a.iter().map(|&(r, c, v)| (c, r, w.values[c] * v / w.values[r])).collect();
    let t = match kind {
        GeneratorKind::AStar | GeneratorKind::LStar => star,
        GeneratorKind::ASym | GeneratorKind::AAnti => {
            let s = if kind == GeneratorKind::ASym { 0.5 } else { -0.5 };
            let mut t: Vec<_> = a.iter().map(|&(r, c, v)| (r, c, 0.5 * v)).collect();
            t.extend(star.into_iter().map(|(r, c, v)| (r, c, s * v)));
            t
        }
        _ => unreachable!(),
    };
    Ok(GeneratorMatrix::from_triplets(kind, n, t))
}

/// Relative mismatch between `A_s f` and `-(L f_inf / f_inf) f / 2 + (L + L*) f / 2`.
///
/// The identity is exact only for exactly stationary `f_inf` and a
/// skew transport discretization; upwinding leaves an `O(dx + dv)` term.
pub fn generator_sym_defect(model: &KineticModel, f_inf: &PhaseField, f: &PhaseField) -> Result<f64> {
    let asym = operator_apply(GeneratorKind::ASym, f, model, Some(f_inf))?;
    let lf = operator_apply(GeneratorKind::L, f, model, None)?;
    let lsf = operator_apply(GeneratorKind::LStar, f, model, Some(f_inf))?;
    let lfinf = operator_apply(GeneratorKind::L, f_inf, model, None)?;
    let mut diff = asym.clone();
    for k in 0..diff.values.len() {
        let rhs = -0.5 * lfinf.values[k] / f_inf.values[k] * f.values[k] + 0.5 * (lf.values[k] + lsf.values[k]);
        diff.values[k] -= rhs;
    }
    let num = weighted_norm_sq(&diff, f_inf)?.sqrt();
    let den = weighted_norm_sq(f, f_inf)?.sqrt();
    Ok(if den > 0.0 { num / den } else { 0.0 })
}
