//! Small linear-algebra kernels shared by the solvers: fixed-order
//! reductions, tridiagonal and banded factorizations, conjugate gradients
//! and a cyclic block-tridiagonal LU used for stationary-state solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{HypoError, Result};

const PAIRWISE_BLOCK: usize = 32;

/// Pairwise summation with a fixed split order, so the result depends only
/// on the input sequence and never on thread scheduling.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        let mut acc = 0.0;
        for &v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise sum of a mapped sequence without materializing it twice.
pub fn pairwise_sum_by(n: usize, f: impl Fn(usize) -> f64) -> f64 {
    fn rec(lo: usize, hi: usize, f: &dyn Fn(usize) -> f64) -> f64 {
        if hi - lo <= PAIRWISE_BLOCK {
            let mut acc = 0.0;
            for i in lo..hi {
                acc += f(i);
            }
            return acc;
        }
        let mid = lo + (hi - lo) / 2;
        rec(lo, mid, f) + rec(mid, hi, f)
    }
    rec(0, n, &f)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    pairwise_sum_by(a.len(), |i| a[i] * b[i])
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Thomas algorithm. `lower[i]` multiplies `x[i-1]` in row `i` (so
/// `lower[0]` is ignored), `upper[i]` multiplies `x[i+1]`.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    if n == 0 {
        return;
    }
    let mut c = vec![0.0; n];
    let mut beta = diag[0];
    c[0] = if n > 1 { upper[0] / beta } else { 0.0 };
    rhs[0] /= beta;
    for i in 1..n {
        beta = diag[i] - lower[i] * c[i - 1];
        if i + 1 < n {
            c[i] = upper[i] / beta;
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

/// Cholesky factor of a symmetric positive definite band matrix stored as
/// `band[i][k] = A[i][i - k]` for `k = 0..=bandwidth`.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandedCholesky {
    /// `entry(i, j)` must return `A[i][j]` for `j <= i`, `i - j <= bw`.
    pub fn factor(n: usize, bw: usize, entry: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut s = entry(i, j);
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(HypoError::SpectralFailure(format!(
                            "banded Cholesky pivot {s:e} at row {i}"
                        )));
                    }
                    l[i * w] = s.sqrt();
                } else {
                    l[i * w + (i - j)] = s / l[j * w];
                }
            }
        }
        Ok(Self { n, bw, l })
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let w = self.bw + 1;
        for i in 0..self.n {
            let mut s = x[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.l[i * w + (i - k)] * x[k];
            }
            x[i] = s / self.l[i * w];
        }
        for i in (0..self.n).rev() {
            let mut s = x[i];
            for k in i + 1..(i + self.bw + 1).min(self.n) {
                s -= self.l[k * w + (k - i)] * x[k];
            }
            x[i] = s / self.l[i * w];
        }
    }
}

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone, Copy)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Conjugate gradients for a symmetric positive semidefinite operator.
/// `project` maps vectors onto the complement of the operator kernel and is
/// applied to the right-hand side and every residual.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64], &mut [f64]),
    project: impl Fn(&mut [f64]),
    rhs: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<CgReport> {
    let n = rhs.len();
    let mut b = rhs.to_vec();
    project(&mut b);
    let bnorm = norm2(&b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgReport { iterations: 0, relative_residual: 0.0 });
    }
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    project(&mut r);
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        let rel = rr.sqrt() / bnorm;
        if rel <= rel_tol {
            return Ok(CgReport { iterations: it, relative_residual: rel });
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(HypoError::NoConvergence {
                method: "conjugate gradient (indefinite direction)",
                iterations: it,
                residual: rel,
            });
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        project(&mut r);
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    // Final true residual, recomputed to avoid drift in the recurrence.
    apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    project(&mut r);
    let rel = norm2(&r) / bnorm;
    if rel <= rel_tol {
        return Ok(CgReport { iterations: max_iter, relative_residual: rel });
    }
    Err(HypoError::NoConvergence { method: "conjugate gradient", iterations: max_iter, residual: rel })
}

/// LU factorization of a block-tridiagonal matrix with `nb` square blocks of
/// size `bs`, optionally with the cyclic corner blocks of a periodic axis.
///
/// Row `i` reads `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1]`; for the
/// cyclic case `lower[0]` couples to `x[nb-1]` and `upper[nb-1]` to `x[0]`.
pub struct BlockTridiagonalLu {
    bs: usize,
    cyclic: bool,
    // Interior block Thomas factors.
    pivots: Vec<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    lower: Vec<DMatrix<f64>>,
    upper_mod: Vec<DMatrix<f64>>,
    // Cyclic border data.
    z: Vec<DMatrix<f64>>,
    border_row_first: Option<DMatrix<f64>>,
    border_row_last: Option<DMatrix<f64>>,
    schur: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl BlockTridiagonalLu {
    pub fn factor(
        lower: Vec<DMatrix<f64>>,
        diag: Vec<DMatrix<f64>>,
        upper: Vec<DMatrix<f64>>,
        cyclic: bool,
    ) -> Result<Self> {
        let nb = diag.len();
        let bs = diag[0].nrows();
        if cyclic && nb < 3 {
            return Err(HypoError::InvalidGrid("cyclic block solve needs at least 3 blocks".into()));
        }
        let m = if cyclic { nb - 1 } else { nb };
        // Forward block elimination on the interior system of size m.
        let mut pivots = Vec::with_capacity(m);
        let mut upper_mod = Vec::with_capacity(m);
        for i in 0..m {
            let mut d = diag[i].clone();
            if i > 0 {
                let prev: &DMatrix<f64> = &upper_mod[i - 1];
                d -= &lower[i] * prev;
            }
            let lu = d.lu();
            let u = if i + 1 < m {
                lu.solve(&upper[i]).ok_or_else(|| singular("block pivot"))?
            } else {
                DMatrix::zeros(bs, bs)
            };
            pivots.push(lu);
            upper_mod.push(u);
        }
        let mut me = Self {
            bs,
            cyclic,
            pivots,
            lower: lower.clone(),
            upper_mod,
            z: Vec::new(),
            border_row_first: None,
            border_row_last: None,
            schur: None,
        };
        if cyclic {
            // E couples interior rows 0 and m-1 to the border unknown x[nb-1].
            let mut e = vec![DMatrix::zeros(bs, bs); m];
            e[0] = lower[0].clone();
            e[m - 1] += &upper[m - 1];
            let z = me.solve_interior_blocks(e)?;
            // F couples the border row to x[0] and x[m-1].
            let f_first = upper[nb - 1].clone();
            let f_last = lower[nb - 1].clone();
            let s = &diag[nb - 1] - &f_first * &z[0] - &f_last * &z[m - 1];
            me.schur = Some(s.lu());
            me.z = z;
            me.border_row_first = Some(f_first);
            me.border_row_last = Some(f_last);
        }
        Ok(me)
    }

    fn solve_interior_blocks(&self, mut rhs: Vec<DMatrix<f64>>) -> Result<Vec<DMatrix<f64>>> {
        let m = self.pivots.len();
        for i in 0..m {
            if i > 0 {
                let prev = rhs[i - 1].clone();
                rhs[i] -= &self.lower[i] * prev;
            }
            rhs[i] = self.pivots[i].solve(&rhs[i]).ok_or_else(|| singular("interior block"))?;
        }
        for i in (0..m.saturating_sub(1)).rev() {
            let next = rhs[i + 1].clone();
            rhs[i] -= &self.upper_mod[i] * next;
        }
        Ok(rhs)
    }

    fn solve_interior(&self, rhs: &mut [DVector<f64>]) -> Result<()> {
        let m = self.pivots.len();
        for i in 0..m {
            if i > 0 {
                let prev = rhs[i - 1].clone();
                rhs[i] -= &self.lower[i] * prev;
            }
            rhs[i] = self.pivots[i].solve(&rhs[i]).ok_or_else(|| singular("interior block"))?;
        }
        for i in (0..m.saturating_sub(1)).rev() {
            let next = rhs[i + 1].clone();
            rhs[i] -= &self.upper_mod[i] * next;
        }
        Ok(())
    }

    /// Solve in place; `x` is the flattened block vector.
    pub fn solve(&self, x: &mut [f64]) -> Result<()> {
        let bs = self.bs;
        let nb = x.len() / bs;
        let m = self.pivots.len();
        let mut blocks: Vec<DVector<f64>> =
            (0..m).map(|i| DVector::from_column_slice(&x[i * bs..(i + 1) * bs])).collect();
        self.solve_interior(&mut blocks)?;
        if self.cyclic {
            let b_last = DVector::from_column_slice(&x[(nb - 1) * bs..nb * bs]);
            let ff = self.border_row_first.as_ref().unwrap();
            let fl = self.border_row_last.as_ref().unwrap();
            let r = b_last - ff * &blocks[0] - fl * &blocks[m - 1];
            let xl = self.schur.as_ref().unwrap().solve(&r).ok_or_else(|| singular("border"))?;
            for i in 0..m {
                blocks[i] -= &self.z[i] * &xl;
            }
            x[(nb - 1) * bs..nb * bs].copy_from_slice(xl.as_slice());
        }
        for (i, b) in blocks.iter().enumerate() {
            x[i * bs..(i + 1) * bs].copy_from_slice(b.as_slice());
        }
        Ok(())
    }
}

fn singular(what: &str) -> HypoError {
    HypoError::SpectralFailure(format!("singular {what} in block-tridiagonal solve"))
}
