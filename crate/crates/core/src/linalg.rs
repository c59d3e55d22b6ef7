//! Dense SVD-based solves used by the estimators.
//!
//! Factorizations always run on the tall orientation of the matrix, and very
//! tall matrices are reduced by a Householder QR first, so the bidiagonal SVD
//! only ever sees a square triangular factor.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{LabError, Result};

/// Rows-to-columns ratio above which a QR pass precedes the SVD.
const QR_PRECONDITION_RATIO: usize = 2;

/// Spectral filter applied to the singular values in [`spectral_solve`].
#[derive(Debug, Clone, Copy)]
pub enum Filter {
    /// Pseudoinverse: `1/s` above `rcond * s_max`, zero below.
    Pinv { rcond: f64 },
    /// Ridge shrinkage `s / (s^2 + shift)` on every direction.
    Shrink { shift: f64 },
    /// Pseudoinverse truncation followed by shrinkage on the kept directions.
    PinvShrink { rcond: f64, shift: f64 },
}

#[derive(Debug, Clone)]
pub struct SpectralSolution {
    pub x: DVector<f64>,
    pub rank: usize,
    /// Smallest singular value that passed the truncation.
    pub sigma_min_kept: f64,
    pub sigma_max: f64,
}

/// Machine-epsilon times the larger dimension.
pub fn default_rcond(rows: usize, cols: usize) -> f64 {
    f64::EPSILON * rows.max(cols) as f64
}

type DynSvd = SVD<f64, nalgebra::Dyn, nalgebra::Dyn>;

/// Whether `svd` reproduces `m` and has orthonormal factors to working accuracy.
fn svd_is_consistent(m: &DMatrix<f64>, svd: &DynSvd) -> bool {
    let (Some(u), Some(vt)) = (&svd.u, &svd.v_t) else {
        return false;
    };
    let s = &svd.singular_values;
    if s.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let k = s.len();
    let scale = s.amax().max(f64::MIN_POSITIVE);
    let tol = 1e3 * f64::EPSILON * (m.nrows() + m.ncols()) as f64;
    let mut us = u.clone();
    for (j, sj) in s.iter().enumerate() {
        us.column_mut(j).scale_mut(*sj);
    }
    let recon = (us * vt - m).amax();
    let eye = DMatrix::<f64>::identity(k, k);
    recon <= tol * scale && (u.tr_mul(u) - &eye).amax() <= tol && (vt * vt.transpose() - eye).amax() <= tol
}

/// One-sided Jacobi SVD of a matrix with at least as many rows as columns.
///
/// Much slower than the bidiagonal routine but unconditionally reliable on
/// exactly rank-deficient input; zero singular values get a zero column in `U`.
fn jacobi_svd(m: &DMatrix<f64>) -> Result<DynSvd> {
    let (rows, cols) = m.shape();
    debug_assert!(rows >= cols);
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(cols, cols);
    let tol = f64::EPSILON * rows as f64;
    // columns below this squared norm are round-off and are left alone
    let floor = (f64::EPSILON * m.norm()).powi(2);
    let mut converged = false;
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if alpha <= floor || beta <= floor || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = c * t;
                for mat in [&mut a, &mut v] {
                    for i in 0..mat.nrows() {
                        let (x, y) = (mat[(i, p)], mat[(i, q)]);
                        mat[(i, p)] = c * x - sn * y;
                        mat[(i, q)] = sn * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LabError::Numerical("Jacobi SVD failed to converge".into()));
    }
    let singular_values = DVector::from_fn(cols, |j, _| a.column(j).norm());
    for (j, sj) in singular_values.iter().enumerate() {
        if *sj > 0.0 {
            a.column_mut(j).unscale_mut(*sj);
        } else {
            a.column_mut(j).fill(0.0);
        }
    }
    Ok(SVD {
        u: Some(a),
        v_t: Some(v.transpose()),
        singular_values,
    })
}

/// SVD of a tall matrix, validated and recomputed by Jacobi when the fast
/// routine returns inconsistent factors.
fn svd_checked(m: DMatrix<f64>) -> Result<DynSvd> {
    if let Some(svd) = SVD::try_new_unordered(m.clone(), true, true, f64::EPSILON, 0) {
        if svd_is_consistent(&m, &svd) {
            return Ok(svd);
        }
    }
    jacobi_svd(&m)
}

/// Householder QR of a tall matrix, `A = Q R`.
///
/// Reflectors are kept as unit vectors; a column whose trailing part is
/// exactly zero gets no reflector, which keeps `Q` exact on the
/// structurally rank-deficient designs produced by anonymization.
struct HouseholderQr {
    rows: usize,
    /// `(start, v)`: reflector `I - 2 v v^T` acting on rows `start..`.
    reflectors: Vec<(usize, Vec<f64>)>,
    r: DMatrix<f64>,
}

impl HouseholderQr {
    fn new(mut a: DMatrix<f64>) -> Self {
        let (rows, cols) = a.shape();
        let mut reflectors = Vec::with_capacity(cols);
        let data = a.as_mut_slice();
        for j in 0..cols.min(rows) {
            let col = &data[j * rows + j..(j + 1) * rows];
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let alpha = if col[0] >= 0.0 { -norm } else { norm };
            let mut v = col.to_vec();
            v[0] -= alpha;
            let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if vnorm == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= vnorm);
            data[j * rows + j] = alpha;
            data[j * rows + j + 1..(j + 1) * rows].fill(0.0);
            for c in j + 1..cols {
                let target = &mut data[c * rows + j..(c + 1) * rows];
                let s: f64 = v.iter().zip(target.iter()).map(|(a, b)| a * b).sum();
                target.iter_mut().zip(&v).for_each(|(t, vi)| *t -= 2.0 * s * vi);
            }
            reflectors.push((j, v));
        }
        let r = a.rows(0, cols.min(rows)).upper_triangle();
        HouseholderQr { rows, reflectors, r }
    }

    fn reflect(v: &[f64], x: &mut [f64]) {
        let s: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        x.iter_mut().zip(v).for_each(|(t, vi)| *t -= 2.0 * s * vi);
    }

    /// First `r.nrows()` entries of `Q^T b`.
    fn qt_mul_thin(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        for (start, v) in &self.reflectors {
            Self::reflect(v, &mut x.as_mut_slice()[*start..]);
        }
        x.rows(0, self.r.nrows()).into_owned()
    }

    /// `Q [c; 0]`.
    fn q_mul_thin(&self, c: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(self.rows);
        x.rows_mut(0, c.len()).copy_from(c);
        for (start, v) in self.reflectors.iter().rev() {
            Self::reflect(v, &mut x.as_mut_slice()[*start..]);
        }
        x
    }
}

/// Tall factorization `T = U S V^T` with thin `U`, used through the two
/// projections the solvers need: `U^T b` and `V c`.
struct TallFactor {
    svd: DynSvd,
    qr: Option<HouseholderQr>,
}

impl TallFactor {
    fn new(tall: DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = tall.shape();
        debug_assert!(rows >= cols);
        if cols > 0 && rows >= QR_PRECONDITION_RATIO * cols {
            let qr = HouseholderQr::new(tall);
            let svd = svd_checked(qr.r.clone())?;
            Ok(TallFactor { svd, qr: Some(qr) })
        } else {
            Ok(TallFactor {
                svd: svd_checked(tall)?,
                qr: None,
            })
        }
    }

    fn singular_values(&self) -> &DVector<f64> {
        &self.svd.singular_values
    }

    /// `U^T b` for `b` of length `rows`.
    fn ut_mul(&self, b: &DVector<f64>) -> DVector<f64> {
        let u = self.svd.u.as_ref().expect("U computed");
        match &self.qr {
            Some(qr) => u.tr_mul(&qr.qt_mul_thin(b)),
            None => u.tr_mul(b),
        }
    }

    /// `U c` giving a vector of length `rows`.
    fn u_mul(&self, c: &DVector<f64>) -> DVector<f64> {
        let u = self.svd.u.as_ref().expect("U computed");
        match &self.qr {
            Some(qr) => qr.q_mul_thin(&(u * c)),
            None => u * c,
        }
    }

    /// `V^T b` for `b` of length `cols`.
    fn vt_mul(&self, b: &DVector<f64>) -> DVector<f64> {
        self.svd.v_t.as_ref().expect("V computed") * b
    }

    /// `V c` giving a vector of length `cols`.
    fn v_mul(&self, c: &DVector<f64>) -> DVector<f64> {
        self.svd.v_t.as_ref().expect("V computed").tr_mul(c)
    }
}

fn apply_filter(s: &DVector<f64>, filter: Filter) -> (DVector<f64>, usize, f64, f64) {
    let s_max = s.iter().cloned().fold(0.0, f64::max);
    let mut rank = 0;
    let mut s_min_kept = f64::INFINITY;
    let weights = s.map(|si| {
        let keep = match filter {
            Filter::Pinv { rcond } | Filter::PinvShrink { rcond, .. } => si > rcond * s_max && si > 0.0,
            Filter::Shrink { .. } => si > 0.0,
        };
        if !keep {
            return 0.0;
        }
        rank += 1;
        s_min_kept = s_min_kept.min(si);
        match filter {
            Filter::Pinv { .. } => 1.0 / si,
            Filter::Shrink { shift } | Filter::PinvShrink { shift, .. } => si / (si * si + shift),
        }
    });
    if rank == 0 {
        s_min_kept = 0.0;
    }
    (weights, rank, s_min_kept, s_max)
}

/// Minimum-norm filtered solve of `a x ~ b` for any shape of `a`.
pub fn spectral_solve(a: &DMatrix<f64>, b: &DVector<f64>, filter: Filter) -> Result<SpectralSolution> {
    let (rows, cols) = a.shape();
    if b.len() != rows {
        return Err(LabError::Dimension(format!(
            "right-hand side has length {} but the matrix has {rows} rows",
            b.len()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(LabError::Numerical("non-finite input to solver".into()));
    }
    if rows == 0 || cols == 0 {
        return Ok(SpectralSolution {
            x: DVector::zeros(cols),
            rank: 0,
            sigma_min_kept: 0.0,
            sigma_max: 0.0,
        });
    }
    if rows >= cols {
        // a = U S V^T, x = V f(S) U^T b
        let f = TallFactor::new(a.clone())?;
        let (w, rank, smin, smax) = apply_filter(f.singular_values(), filter);
        let c = f.ut_mul(b).component_mul(&w);
        Ok(SpectralSolution {
            x: f.v_mul(&c),
            rank,
            sigma_min_kept: smin,
            sigma_max: smax,
        })
    } else {
        // a^T = U S V^T, a = V S U^T, x = U f(S) V^T b
        let f = TallFactor::new(a.transpose())?;
        let (w, rank, smin, smax) = apply_filter(f.singular_values(), filter);
        let c = f.vt_mul(b).component_mul(&w);
        Ok(SpectralSolution {
            x: f.u_mul(&c),
            rank,
            sigma_min_kept: smin,
            sigma_max: smax,
        })
    }
}

/// Singular values of `a`, descending.
pub fn singular_values(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(Vec::new());
    }
    let tall = if a.nrows() >= a.ncols() {
        a.clone()
    } else {
        a.transpose()
    };
    let reduced = if tall.nrows() >= QR_PRECONDITION_RATIO * tall.ncols() {
        HouseholderQr::new(tall).r
    } else {
        tall
    };
    let s = svd_checked(reduced)?.singular_values;
    let mut v: Vec<f64> = s.iter().cloned().collect();
    v.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(v)
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(a)?.first().copied().unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn qr_path_matches_direct_path() {
        // 30 x 5 takes the QR route, compare with nalgebra's own pseudo-inverse
        for (r, c) in [(30, 5), (5, 30), (7, 6), (6, 7)] {
            let a = gaussian(r, c, 1 + r as u64);
            let b = DVector::from_iterator(r, gaussian(r, 1, 99).iter().cloned());
            let sol = spectral_solve(&a, &b, Filter::Pinv { rcond: 1e-12 }).unwrap();
            let pinv = a.clone().pseudo_inverse(1e-12).unwrap();
            assert!((sol.x - pinv * &b).amax() < 1e-10, "{r}x{c}");
            assert_eq!(sol.rank, r.min(c));
        }
    }

    #[test]
    fn qr_path_on_repeated_column_blocks() {
        // columns that are exact combinations of a few indicator vectors leave
        // exactly zero trailing parts during the QR sweep
        let (rows, k, dup) = (60, 3, 10);
        let noise = gaussian(rows, 5, 31);
        let mix = gaussian(k, dup, 32);
        let mut a = DMatrix::zeros(rows, dup + 5);
        for i in 0..rows {
            for j in 0..dup {
                a[(i, j)] = mix[(i % k, j)];
            }
        }
        a.columns_mut(dup, 5).copy_from(&noise);
        let b = DVector::from_iterator(rows, gaussian(rows, 1, 33).iter().cloned());
        let sol = spectral_solve(&a, &b, Filter::Pinv { rcond: default_rcond(rows, dup + 5) }).unwrap();
        let direct = a.clone().svd(true, true).pseudo_inverse(1e-10).unwrap() * &b;
        assert_eq!(sol.rank, k + 5);
        assert!((sol.x - direct).amax() < 1e-9);
        let wide = spectral_solve(&a.transpose(), &DVector::from_element(dup + 5, 1.0), Filter::Pinv { rcond: 1e-12 }).unwrap();
        let direct = a.transpose().svd(true, true).pseudo_inverse(1e-10).unwrap() * DVector::from_element(dup + 5, 1.0);
        assert!((wide.x - direct).amax() < 1e-9);
    }

    #[test]
    fn exact_rank_deficiency_is_truncated() {
        let u = gaussian(40, 2, 3);
        let v = gaussian(2, 10, 4);
        let a = u * v; // rank 2
        let b = DVector::from_element(40, 1.0);
        let sol = spectral_solve(&a, &b, Filter::Pinv { rcond: default_rcond(40, 10) }).unwrap();
        assert_eq!(sol.rank, 2);
        assert!(sol.x.norm().is_finite());
    }

    #[test]
    fn jacobi_reconstructs_and_orthogonalizes() {
        for (r, c, rank) in [(8, 8, 8), (12, 5, 3), (9, 9, 2)] {
            let a = gaussian(r, rank, 50 + r as u64) * gaussian(rank, c, 60 + c as u64);
            let svd = jacobi_svd(&a).unwrap();
            let kept = svd.singular_values.iter().filter(|&&s| s > 1e-10).count();
            assert_eq!(kept, rank.min(c));
            let u = svd.u.as_ref().unwrap();
            let mut us = u.clone();
            for (j, sj) in svd.singular_values.iter().enumerate() {
                us.column_mut(j).scale_mut(*sj);
            }
            assert!((us * svd.v_t.as_ref().unwrap() - &a).amax() < 1e-12);
        }
    }

    #[test]
    fn square_rank_deficient_solve_matches_jacobi() {
        // square products of thin factors where the bidiagonal routine can
        // return factors that do not reproduce the matrix
        for seed in 0..40u64 {
            let n = 6 + (seed % 7) as usize;
            let rank = 1 + (seed % 4) as usize;
            let a = gaussian(n, rank, 100 + seed) * gaussian(rank, n, 200 + seed);
            let b = DVector::from_iterator(n, gaussian(n, 1, 300 + seed).iter().cloned());
            let sol = spectral_solve(&a, &b, Filter::Pinv { rcond: default_rcond(n, n) }).unwrap();
            let j = jacobi_svd(&a).unwrap();
            let smax = j.singular_values.amax();
            let w = j.singular_values.map(|s| if s > 1e-10 * smax { 1.0 / s } else { 0.0 });
            let reference = j.v_t.unwrap().tr_mul(&j.u.unwrap().tr_mul(&b).component_mul(&w));
            assert_eq!(sol.rank, rank, "seed {seed}");
            assert!((sol.x - reference).amax() < 1e-8, "seed {seed}");
        }
    }

    #[test]
    fn spectral_norm_of_rank_one() {
        let u = DVector::from_vec(vec![0.6, 0.8, 0.0]);
        let v = DVector::from_vec(vec![0.0, 1.0]);
        let a = &u * v.transpose() * -2.5;
        assert!((spectral_norm(&a).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = DMatrix::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        let b = DVector::from_element(2, 1.0);
        assert!(matches!(
            spectral_solve(&a, &b, Filter::Pinv { rcond: 1e-12 }),
            Err(LabError::Numerical(_))
        ));
    }
}
