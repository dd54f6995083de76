//! Jacobi-based dense factorizations.
//!
//! Both routines are rotation sweeps over small dense matrices (the whole
//! toolkit works at d_model <= a few hundred), which keeps them accurate to a
//! few ulps and fully deterministic.

use super::matrix::{dot, Matrix};
use crate::error::{shape_err, Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `a = u · diag(sigma) · vt`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    /// m×k, orthonormal columns.
    pub u: Matrix,
    /// Length k = min(m, n), descending, nonnegative.
    pub sigma: Vec<f64>,
    /// k×n, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        self.u.scale_cols(&self.sigma).matmul(&self.vt)
    }

    /// Keep the leading `r` components.
    pub fn truncate(&self, r: usize) -> SvdResult {
        let r = r.min(self.sigma.len());
        SvdResult {
            u: self.u.col_block(0, r),
            sigma: self.sigma[..r].to_vec(),
            vt: self.vt.row_block(0, r),
        }
    }
}

/// Symmetric eigendecomposition `a = vectors · diag(values) · vectorsᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymEig {
    /// Descending.
    pub values: Vec<f64>,
    /// Eigenvectors as columns.
    pub vectors: Matrix,
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Sign convention: in every left singular vector the entry of largest
/// magnitude (lowest row index on ties) is nonnegative; the matching row of
/// `vt` is flipped with it.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(shape_err("svd of an empty matrix"));
    }
    let mut res = if m >= n {
        one_sided_jacobi(a)?
    } else {
        // A = (Aᵀ)ᵀ = (U' Σ V'ᵀ)ᵀ = V' Σ U'ᵀ
        let t = one_sided_jacobi(&a.transpose())?;
        SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        }
    };
    canonicalize_signs(&mut res.u, Some(&mut res.vt));
    Ok(res)
}

/// Requires `rows >= cols`.
fn one_sided_jacobi(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * m as f64;

    let mut converged = n == 1;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            routine: "svd",
            sweeps: MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let cutoff = sigma[0] * f64::EPSILON * m.max(n) as f64;
    let mut u = Matrix::zeros(m, n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        if sigma[k] > cutoff && sigma[k] > 0.0 {
            let col: Vec<f64> = cols[j].iter().map(|x| x / sigma[k]).collect();
            u.set_col(k, &col);
        } else {
            missing.push(k);
        }
    }
    complete_orthonormal(&mut u, &missing);

    let vt = Matrix::from_fn(n, n, |k, c| v[order[k]][c]);
    Ok(SvdResult { u, sigma, vt })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fill the listed columns of `u` with unit vectors orthogonal to every other
/// column, drawing candidates from the standard basis in index order.
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    let (m, k) = u.shape();
    let mut filled: Vec<bool> = (0..k).map(|c| !missing.contains(&c)).collect();
    let mut candidate = 0;
    for &target in missing {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // two Gram-Schmidt passes
            for _ in 0..2 {
                for c in (0..k).filter(|&c| filled[c]) {
                    let col = u.col(c);
                    let proj = dot(&col, &e);
                    for (x, y) in e.iter_mut().zip(&col) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                let col: Vec<f64> = e.iter().map(|x| x / norm).collect();
                u.set_col(target, &col);
                filled[target] = true;
                break;
            }
        }
    }
}

/// Flip column signs so the largest-magnitude entry of each column is
/// nonnegative. Matching rows of `partner` flip with them.
fn canonicalize_signs(u: &mut Matrix, mut partner: Option<&mut Matrix>) {
    let (m, k) = u.shape();
    for c in 0..k {
        let mut best = 0;
        for r in 1..m {
            if u[(r, c)].abs() > u[(best, c)].abs() {
                best = r;
            }
        }
        if u[(best, c)] < 0.0 {
            for r in 0..m {
                u[(r, c)] = -u[(r, c)];
            }
            if let Some(p) = partner.as_deref_mut() {
                for x in p.row_mut(c) {
                    *x = -*x;
                }
            }
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    let n = a.rows();
    if a.cols() != n {
        return Err(shape_err(format!("sym_eig of non-square {}x{}", n, a.cols())));
    }
    if n == 0 {
        return Err(shape_err("sym_eig of an empty matrix"));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("sym_eig input".into()));
    }
    let scale = a.frobenius_norm();
    if a.max_abs_diff(&a.transpose()) > 1e-10 * scale.max(1.0) {
        return Err(Error::InvalidArgument("sym_eig input is not symmetric".into()));
    }
    // symmetrize exactly
    let mut s = Matrix::from_fn(n, n, |r, c| 0.5 * (a[(r, c)] + a[(c, r)]));
    let mut v = Matrix::identity(n);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| s[(r, c)] * s[(r, c)])
            .sum();
        if off <= (f64::EPSILON * scale).powi(2) || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = s[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let g = 100.0 * apq.abs();
                if s[(p, p)].abs() + g == s[(p, p)].abs() && s[(q, q)].abs() + g == s[(q, q)].abs() {
                    s[(p, q)] = 0.0;
                    s[(q, p)] = 0.0;
                    continue;
                }
                let theta = (s[(q, q)] - s[(p, p)]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let skp = s[(k, p)];
                    let skq = s[(k, q)];
                    s[(k, p)] = c * skp - sn * skq;
                    s[(k, q)] = sn * skp + c * skq;
                }
                for k in 0..n {
                    let spk = s[(p, k)];
                    let sqk = s[(q, k)];
                    s[(p, k)] = c * spk - sn * sqk;
                    s[(q, k)] = sn * spk + c * sqk;
                }
                s[(p, q)] = 0.0;
                s[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            routine: "sym_eig",
            sweeps: MAX_SWEEPS,
        });
    }

    let diag: Vec<f64> = (0..n).map(|i| s[(i, i)]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = v.select_cols(&order);
    canonicalize_signs(&mut vectors, None);
    Ok(SymEig { values, vectors })
}

/// SVD of a symmetric positive semidefinite matrix through its
/// eigendecomposition; negative eigenvalues (rounding noise) clamp to zero.
pub fn svd_psd(a: &Matrix) -> Result<SvdResult> {
    let eig = sym_eig(a)?;
    let sigma = eig.values.iter().map(|&l| l.max(0.0)).collect();
    Ok(SvdResult {
        vt: eig.vectors.transpose(),
        u: eig.vectors,
        sigma,
    })
}

/// Moore–Penrose pseudo-inverse; singular values at or below
/// `rcond · sigma_max` are treated as zero.
pub fn pinv(a: &Matrix, rcond: f64) -> Result<Matrix> {
    let f = svd(a)?;
    let cutoff = rcond * f.sigma.first().copied().unwrap_or(0.0);
    let inv: Vec<f64> = f
        .sigma
        .iter()
        .map(|&s| if s > cutoff && s > 0.0 { 1.0 / s } else { 0.0 })
        .collect();
    Ok(f.vt.transpose().scale_cols(&inv).matmul_t(&f.u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orthonormality_error(q: &Matrix) -> f64 {
        q.t_matmul(q).max_abs_diff(&Matrix::identity(q.cols()))
    }

    #[test]
    fn identity_and_diagonal() {
        let s = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(s.sigma, vec![1.0, 1.0, 1.0]);
        let s = svd(&Matrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn wide_tall_and_rank_deficient() {
        for (r, c) in [(7, 3), (3, 7), (5, 5), (1, 4), (4, 1)] {
            let a = random(r, c, (r * 10 + c) as u64);
            let f = svd(&a).unwrap();
            assert!(f.reconstruct().sub(&a).frobenius_norm() <= 1e-12 * a.frobenius_norm());
            assert!(orthonormality_error(&f.u) < 1e-12);
            assert!(orthonormality_error(&f.vt.transpose()) < 1e-12);
            assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
        // rank 1 outer product: completion must still give orthonormal u
        let x = Matrix::from_fn(5, 1, |r, _| r as f64 + 1.0);
        let a = x.matmul(&Matrix::from_fn(1, 3, |_, c| c as f64 - 1.5));
        let f = svd(&a).unwrap();
        assert!(orthonormality_error(&f.u) < 1e-12);
        assert!(f.reconstruct().sub(&a).frobenius_norm() <= 1e-12 * a.frobenius_norm());
        assert!(f.sigma[1] < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let f = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(f.sigma, vec![0.0, 0.0]);
        assert!(orthonormality_error(&f.u) < 1e-15);
    }

    #[test]
    fn sign_convention_holds() {
        let f = svd(&random(6, 4, 3)).unwrap();
        for c in 0..4 {
            let col = f.u.col(c);
            let best = col
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if v.abs() > col[b].abs() { i } else { b });
            assert!(col[best] >= 0.0);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = Matrix::identity(2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(svd(&a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sym_eig_reconstructs() {
        let b = random(6, 6, 11);
        let s = b.matmul_t(&b);
        let e = sym_eig(&s).unwrap();
        let rec = e.vectors.scale_cols(&e.values).matmul_t(&e.vectors);
        assert!(rec.max_abs_diff(&s) < 1e-12);
        assert!(orthonormality_error(&e.vectors) < 1e-12);
        assert!(sym_eig(&random(3, 3, 1)).is_err());
    }

    #[test]
    fn psd_clamps_negative_noise() {
        let mut s = Matrix::diag(&[2.0, 1.0, 0.0]);
        s[(2, 2)] = -1e-17;
        let f = svd_psd(&s).unwrap();
        assert_eq!(f.sigma[2], 0.0);
    }

    #[test]
    fn pinv_of_full_column_rank() {
        let a = random(6, 3, 5);
        let p = pinv(&a, 1e-12).unwrap();
        assert!(p.matmul(&a).max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }
}
