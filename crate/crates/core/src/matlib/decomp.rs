//! QR and SVD kernels.
//!
//! QR uses Householder reflections followed by a sign correction that makes
//! every diagonal entry of `R` nonnegative, so the factorization is unique.
//! The SVD is one-sided (Hestenes) Jacobi on the thin shape.

use super::random::gaussian_matrix;
use super::Matrix;
use crate::error::{Error, Result};

/// Relative threshold used by every column-rank test.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Oversampling used when callers do not choose one.
pub const DEFAULT_OVERSAMPLE: usize = 8;

/// Subspace iterations performed by [`randomized_svd_orthogonalize`].
pub const POWER_ITERATIONS: usize = 2;

const MAX_JACOBI_SWEEPS: usize = 80;

/// Thin QR factors with `diag(r_factor) ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QrResult {
    /// `rows × cols`, orthonormal columns.
    pub q: Matrix,
    /// `cols × cols`, upper triangular.
    pub r_factor: Matrix,
}

/// Thin singular value decomposition `m = u · diag(sigma) · vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    /// Descending.
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

fn require_tall(m: &Matrix, op: &str) -> Result<()> {
    if m.rows() < m.cols() {
        return Err(Error::dim(format!(
            "{op} needs rows >= cols, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

fn require_full_rank(sigma: &[f64]) -> Result<()> {
    let largest = sigma.first().copied().unwrap_or(0.0);
    let smallest = sigma.last().copied().unwrap_or(0.0);
    if !(largest > 0.0) || smallest <= RANK_TOLERANCE * largest {
        return Err(Error::RankDeficient { smallest, largest });
    }
    Ok(())
}

/// Householder thin QR with no rank test and no sign correction.
///
/// `q` always has orthonormal columns, even for rank-deficient input.
pub(crate) fn householder_thin(m: &Matrix) -> (Matrix, Matrix) {
    let (rows, cols) = m.shape();
    debug_assert!(rows >= cols);
    let mut work = m.clone();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(cols);

    for j in 0..cols {
        let x: Vec<f64> = (j..rows).map(|i| work[(i, j)]).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm = v.iter().map(|e| e * e).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        v.iter_mut().for_each(|e| *e /= vnorm);
        for c in j..cols {
            let d: f64 = v.iter().enumerate().map(|(i, vi)| vi * work[(j + i, c)]).sum();
            for (i, vi) in v.iter().enumerate() {
                work[(j + i, c)] -= 2.0 * d * vi;
            }
        }
        reflectors.push(Some(v));
    }

    let mut q = Matrix::zeros(rows, cols);
    for j in 0..cols {
        q[(j, j)] = 1.0;
    }
    for (j, v) in reflectors.iter().enumerate().rev() {
        let Some(v) = v else { continue };
        for c in 0..cols {
            let d: f64 = v.iter().enumerate().map(|(i, vi)| vi * q[(j + i, c)]).sum();
            for (i, vi) in v.iter().enumerate() {
                q[(j + i, c)] -= 2.0 * d * vi;
            }
        }
    }

    let mut r = Matrix::zeros(cols, cols);
    for i in 0..cols {
        for j in i..cols {
            r[(i, j)] = work[(i, j)];
        }
    }
    (q, r)
}

/// Thin QR of a tall, full-column-rank matrix.
///
/// Columns of `Q` whose `R` diagonal came out negative are flipped together
/// with the matching row of `R`, so `diag(R) ≥ 0` and the output is unique.
pub fn qr_thin(m: &Matrix) -> Result<QrResult> {
    require_tall(m, "qr_thin")?;
    require_full_rank(&singular_values(m))?;

    let (mut q, mut r) = householder_thin(m);
    for j in 0..m.cols() {
        if r[(j, j)] < 0.0 {
            for i in 0..q.rows() {
                q[(i, j)] = -q[(i, j)];
            }
            for c in j..r.cols() {
                r[(j, c)] = -r[(j, c)];
            }
        }
    }
    Ok(QrResult { q, r_factor: r })
}

/// One-sided Jacobi SVD of a tall matrix.
pub fn jacobi_svd(m: &Matrix) -> Result<Svd> {
    require_tall(m, "jacobi_svd")?;
    let (rows, cols) = m.shape();
    let mut u: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                let beta: f64 = u[q].iter().map(|x| x * x).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut u, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = u
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    for (col, &s) in u.iter_mut().zip(&sigma) {
        if s > 0.0 {
            col.iter_mut().for_each(|x| *x /= s);
        }
    }

    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));
    let mut u_mat = Matrix::zeros(rows, cols);
    let mut v_mat = Matrix::zeros(cols, cols);
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..rows {
            u_mat[(i, dst)] = u[src][i];
        }
        for i in 0..cols {
            v_mat[(i, dst)] = v[src][i];
        }
    }
    sigma = order.iter().map(|&i| sigma[i]).collect();
    Ok(Svd {
        u: u_mat,
        sigma,
        v: v_mat,
    })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Singular values of any matrix, descending.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let svd = if m.rows() >= m.cols() {
        jacobi_svd(m)
    } else {
        jacobi_svd(&m.transpose())
    };
    svd.expect("shape oriented tall").sigma
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Sum of singular values.
pub fn nuclear_norm(m: &Matrix) -> f64 {
    singular_values(m).iter().sum()
}

/// Orthogonal polar factor `U·Vᵀ` of a tall full-rank matrix.
pub fn svd_orthogonalize(m: &Matrix) -> Result<Matrix> {
    require_tall(m, "svd_orthogonalize")?;
    let svd = jacobi_svd(m)?;
    require_full_rank(&svd.sigma)?;
    svd.u.matmul_t(&svd.v)
}

/// Orthonormal factor `Q·U` from a randomized range finder.
///
/// A Gaussian sketch of width `cols + oversample` (capped at `rows`) is
/// refined by [`POWER_ITERATIONS`] subspace iterations; `U` holds the left
/// singular vectors of `Qᵀ·m`.
pub fn randomized_svd_orthogonalize(m: &Matrix, oversample: usize, seed: u64) -> Result<Matrix> {
    require_tall(m, "randomized_svd_orthogonalize")?;
    let (rows, cols) = m.shape();
    let width = (cols + oversample).min(rows);
    let omega = gaussian_matrix(cols, width, 1.0, seed);
    let (mut q, _) = householder_thin(&m.matmul(&omega)?);
    for _ in 0..POWER_ITERATIONS {
        let z = m.t_matmul(&q)?;
        let (next, _) = householder_thin(&m.matmul(&z)?);
        q = next;
    }
    let small = q.t_matmul(m)?;
    let svd = jacobi_svd(&small)?;
    require_full_rank(&svd.sigma)?;
    q.matmul(&svd.u)
}

/// Largest principal angle (radians) between the column spaces of two
/// orthonormal-column matrices of equal shape.
pub fn max_principal_angle(q1: &Matrix, q2: &Matrix) -> Result<f64> {
    if q1.shape() != q2.shape() {
        return Err(Error::dim("principal angle needs equal shapes"));
    }
    let proj = q1.matmul(&q1.t_matmul(q2)?)?;
    let residual = q2.sub(&proj)?;
    Ok(spectral_norm(&residual).min(1.0).asin())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram_minus_identity(q: &Matrix) -> f64 {
        q.t_matmul(q).unwrap().max_abs_diff(&Matrix::identity(q.cols()))
    }

    #[test]
    fn qr_identity() {
        let qr = qr_thin(&Matrix::identity(2)).unwrap();
        assert!(qr.q.max_abs_diff(&Matrix::identity(2)) < 1e-15);
        assert!(qr.r_factor.max_abs_diff(&Matrix::identity(2)) < 1e-15);
    }

    #[test]
    fn qr_single_column() {
        let m = Matrix::from_rows(&[&[3.0], &[4.0]]).unwrap();
        let qr = qr_thin(&m).unwrap();
        assert!((qr.q[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((qr.q[(1, 0)] - 0.8).abs() < 1e-15);
        assert!((qr.r_factor[(0, 0)] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn qr_random_reconstructs() {
        let m = gaussian_matrix(6, 3, 1.0, 7);
        let qr = qr_thin(&m).unwrap();
        assert!(gram_minus_identity(&qr.q) < 1e-10);
        assert!(qr.q.matmul(&qr.r_factor).unwrap().rel_diff(&m) < 1e-10);
        for i in 0..3 {
            assert!(qr.r_factor[(i, i)] >= 0.0);
            for j in 0..i {
                assert_eq!(qr.r_factor[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn qr_errors() {
        assert!(matches!(qr_thin(&Matrix::zeros(2, 3)), Err(Error::Dimension(_))));
        let dup = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]).unwrap();
        assert!(matches!(qr_thin(&dup), Err(Error::RankDeficient { .. })));
        assert!(matches!(qr_thin(&Matrix::zeros(3, 2)), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn svd_reconstructs() {
        let m = gaussian_matrix(7, 4, 1.0, 3);
        let svd = jacobi_svd(&m).unwrap();
        let us = svd.u.matmul(&Matrix::from_diagonal(&svd.sigma)).unwrap();
        assert!(us.matmul_t(&svd.v).unwrap().rel_diff(&m) < 1e-12);
        assert!(svd.sigma.windows(2).all(|w| w[0] >= w[1]));
        assert!(gram_minus_identity(&svd.u) < 1e-12);
        assert!(gram_minus_identity(&svd.v) < 1e-12);
    }

    #[test]
    fn svd_orthogonalize_examples() {
        let d = Matrix::from_diagonal(&[2.0, 3.0]);
        assert!(svd_orthogonalize(&d).unwrap().max_abs_diff(&Matrix::identity(2)) < 1e-15);

        let q = qr_thin(&gaussian_matrix(6, 3, 1.0, 5)).unwrap().q;
        let polar = svd_orthogonalize(&q).unwrap();
        assert!(polar.max_abs_diff(&q) < 1e-12);

        let out = svd_orthogonalize(&gaussian_matrix(6, 3, 1.0, 9)).unwrap();
        assert!(gram_minus_identity(&out) < 1e-10);
    }

    #[test]
    fn randomized_matches_exact_subspace() {
        let m = gaussian_matrix(20, 4, 1.0, 17);
        let a = randomized_svd_orthogonalize(&m, 4, 99).unwrap();
        let b = randomized_svd_orthogonalize(&m, 4, 99).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(gram_minus_identity(&a) < 1e-8);
        let exact = svd_orthogonalize(&m).unwrap();
        assert!(max_principal_angle(&exact, &a).unwrap() < 1e-6);
    }

    #[test]
    fn norms() {
        let d = Matrix::from_diagonal(&[3.0, -4.0]);
        assert!((spectral_norm(&d) - 4.0).abs() < 1e-14);
        assert!((nuclear_norm(&d) - 7.0).abs() < 1e-14);
        let wide = Matrix::from_rows(&[&[3.0, 0.0, 0.0]]).unwrap();
        assert!((spectral_norm(&wide) - 3.0).abs() < 1e-15);
    }
}
