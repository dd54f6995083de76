//! Jacobi SVD and eigendecomposition checked against nalgebra.

use mlaforge::numerics::{pinv, svd, svd_psd, sym_eig, Matrix};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn orthonormality_error(q: &Matrix) -> f64 {
    q.t_matmul(q).max_abs_diff(&Matrix::identity(q.cols()))
}

#[test]
fn singular_values_match_nalgebra() {
    for (i, (m, n)) in [(6, 4), (4, 10), (16, 16), (32, 8), (3, 1), (1, 5)].into_iter().enumerate() {
        let a = random(m, n, i as u64);
        let ours = svd(&a).unwrap();
        let mut theirs: Vec<f64> = to_na(&a).singular_values().iter().copied().collect();
        theirs.sort_by(|x, y| y.total_cmp(x));
        assert_eq!(ours.sigma.len(), theirs.len());
        for (s, t) in ours.sigma.iter().zip(&theirs) {
            assert!((s - t).abs() <= 1e-12 * theirs[0], "{m}x{n}: {s} vs {t}");
        }
    }
}

#[test]
fn eigenvalues_match_nalgebra() {
    for seed in 0..5 {
        let b = random(12, 20, seed);
        let a = b.matmul_t(&b);
        let ours = sym_eig(&a).unwrap();
        let mut theirs: Vec<f64> = to_na(&a).symmetric_eigen().eigenvalues.iter().copied().collect();
        theirs.sort_by(|x, y| y.total_cmp(x));
        for (s, t) in ours.values.iter().zip(&theirs) {
            assert!((s - t).abs() <= 1e-11 * theirs[0], "{s} vs {t}");
        }
        let recon = ours.vectors.scale_cols(&ours.values).matmul_t(&ours.vectors);
        assert!(recon.max_abs_diff(&a) <= 1e-11 * theirs[0]);
    }
}

#[test]
fn pinv_matches_nalgebra() {
    let a = random(7, 4, 11);
    let ours = pinv(&a, 1e-12).unwrap();
    let theirs = to_na(&a).pseudo_inverse(1e-12).unwrap();
    let theirs = Matrix::from_fn(4, 7, |r, c| theirs[(r, c)]);
    assert!(ours.max_abs_diff(&theirs) <= 1e-11);
}

#[test]
fn psd_svd_of_low_rank_gram() {
    let b = random(10, 3, 5);
    let a = b.matmul_t(&b);
    let f = svd_psd(&a).unwrap();
    assert!(f.sigma.iter().all(|&s| s >= 0.0));
    assert!(f.sigma[3..].iter().all(|&s| s <= 1e-12 * f.sigma[0]));
    assert!(f.reconstruct().max_abs_diff(&a) <= 1e-12 * f.sigma[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_with_orthonormal_factors(m in 1usize..20, n in 1usize..20, seed in any::<u64>()) {
        let a = random(m, n, seed);
        let f = svd(&a).unwrap();
        let scale = f.sigma[0].max(1.0);
        prop_assert!(f.reconstruct().max_abs_diff(&a) <= 1e-12 * scale);
        prop_assert!(orthonormality_error(&f.u) <= 1e-12);
        prop_assert!(orthonormality_error(&f.vt.transpose()) <= 1e-12);
        prop_assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn svd_is_deterministic(m in 1usize..12, n in 1usize..12, seed in any::<u64>()) {
        let a = random(m, n, seed);
        prop_assert_eq!(svd(&a).unwrap(), svd(&a).unwrap());
    }
}
