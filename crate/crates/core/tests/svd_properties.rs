//! Property suites for the factor-derivative primitive: orthogonality,
//! reconstruction, ordering, skew-symmetry, finite-difference agreement,
//! and the Gram-derivative consistency residual.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use svdkf::svd_diff::{
    differentiated_svd, fd_svd_oracle, split_triangular, svd_factorize, sym_spectral_factors,
};
use svdkf::testing::PreArrayFamily;

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.amax()
}

fn ortho_residual(q: &DMatrix<f64>) -> f64 {
    let gram = q.transpose() * q;
    max_abs(&(gram - DMatrix::<f64>::identity(q.ncols(), q.ncols())))
}

#[test]
fn factorization_invariants_on_random_pre_arrays() {
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let mut checked = 0;
    while checked < 100 {
        let cols = rng.random_range(1..=4usize);
        let rows = cols + rng.random_range(0..=4usize);
        let a = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        let Ok(t) = svd_factorize(&a) else { continue };
        assert!(ortho_residual(&t.w) <= 1e-12, "W orthogonality");
        assert!(ortho_residual(&t.v) <= 1e-12, "V orthogonality");
        let recon = max_abs(&(t.reconstruct() - &a));
        assert!(recon <= 1e-10 * (1.0 + a.amax()), "reconstruction {recon}");
        for i in 1..cols {
            assert!(t.s[i - 1] >= t.s[i], "descending order");
        }
        assert!(t.s[cols - 1] > 0.0);
        checked += 1;
    }
}

/// Collects families with well-separated singular values at the probe point.
fn well_separated_families(count: usize) -> Vec<(PreArrayFamily, f64)> {
    let mut out = Vec::new();
    let mut seed = 0u64;
    while out.len() < count {
        seed += 1;
        let fam = PreArrayFamily::random(seed, 5, 2);
        let t_probe = 0.4 + 0.01 * (seed % 100) as f64;
        let Ok(t) = svd_factorize(&fam.at(t_probe)) else {
            continue;
        };
        let gap = t.s[0] * t.s[0] - t.s[1] * t.s[1];
        if gap.abs() > 1e-3 * t.s[0] * t.s[0] {
            out.push((fam, t_probe));
        }
    }
    out
}

#[test]
fn derivative_matches_fd_oracle_on_100_families() {
    let h = 1e-6;
    let tol = 1e-5f64.max(1e3 * h * h);
    for (fam, t0) in well_separated_families(100) {
        let a = fam.at(t0);
        let ap = fam.derivative_at(t0);
        let d = differentiated_svd(&a, &ap).unwrap();
        let fd = fd_svd_oracle(|t| fam.at(t), t0, h).unwrap();
        for i in 0..2 {
            assert!(
                (d.s_prime[i] - fd.s_prime_fd[i]).abs() <= tol,
                "singular-value derivative off by {}",
                (d.s_prime[i] - fd.s_prime_fd[i]).abs()
            );
        }
        let vdiff = max_abs(&(&d.v_prime - &fd.v_prime_fd));
        assert!(vdiff <= tol, "V' off by {vdiff}");
        // skew-symmetry of V^T V'
        let skew = d.v.transpose() * &d.v_prime;
        assert!(max_abs(&(&skew + skew.transpose())) <= 1e-10);
    }
}

#[test]
fn gram_derivative_consistency_on_100_families() {
    // (A^T A)' by central differences of the Gram product must match the
    // expansion of (V S^2 V^T)' in the analytic factor derivatives.
    let h = 1e-6;
    for (fam, t0) in well_separated_families(100) {
        let a = fam.at(t0);
        let ap = fam.derivative_at(t0);
        let d = differentiated_svd(&a, &ap).unwrap();
        let gram = |t: f64| {
            let at = fam.at(t);
            at.transpose() * at
        };
        let (tp, tm) = (t0 + h, t0 - h);
        let lhs = (gram(tp) - gram(tm)) / (tp - tm);
        let d2 = DMatrix::from_diagonal(&d.s.map(|x| x * x));
        let d2p = DMatrix::from_diagonal(&d.s.zip_map(&d.s_prime, |s, sp| 2.0 * s * sp));
        let rhs = &d.v_prime * &d2 * d.v.transpose()
            + &d.v * d2p * d.v.transpose()
            + &d.v * d2 * d.v_prime.transpose();
        let l_inf = max_abs(&(lhs - rhs));
        assert!(l_inf <= 1e-9, "Gram-derivative residual {l_inf}");
    }
}

#[test]
fn spectral_factors_reconstruct_random_psd() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    for _ in 0..50 {
        let n = rng.random_range(1..=5usize);
        let l = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let p = &l * l.transpose();
        let f = sym_spectral_factors(&p).unwrap();
        assert!(ortho_residual(&f.q) <= 1e-12);
        assert!(f.d_sqrt.iter().all(|&x| x >= 0.0));
        let recon = max_abs(&(f.to_covariance() - &p));
        assert!(recon <= 1e-10 * (1.0 + p.amax()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triangular_split_reassembles(entries in prop::collection::vec(-100.0f64..100.0, 16)) {
        let m = DMatrix::from_row_slice(4, 4, &entries);
        let split = split_triangular(&m);
        prop_assert_eq!(split.reassemble(), m.clone());
        // parts live where they claim
        for i in 0..4 {
            for j in 0..4 {
                if i <= j { prop_assert_eq!(split.lbar[(i, j)], 0.0); }
                if i >= j { prop_assert_eq!(split.ubar[(i, j)], 0.0); }
            }
        }
    }

    #[test]
    fn factorization_branch_is_deterministic(entries in prop::collection::vec(-10.0f64..10.0, 12)) {
        let a = DMatrix::from_row_slice(4, 3, &entries);
        if let (Ok(t1), Ok(t2)) = (svd_factorize(&a), svd_factorize(&a)) {
            prop_assert_eq!(&t1.v, &t2.v);
            prop_assert_eq!(&t1.s, &t2.s);
            // sign convention: dominant entry of every V column is positive
            for j in 0..3 {
                let col = t1.v.column(j);
                let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
                prop_assert!(max >= -min);
            }
        }
    }

    #[test]
    fn zero_derivative_zero_output(entries in prop::collection::vec(-10.0f64..10.0, 10)) {
        let a = DMatrix::from_row_slice(5, 2, &entries);
        if let Ok(d) = differentiated_svd(&a, &DMatrix::zeros(5, 2)) {
            prop_assert!(d.s_prime.amax() < 1e-14);
            prop_assert!(d.v_prime.amax() < 1e-14);
        }
    }
}

#[test]
fn fd_oracle_rejects_bad_step() {
    let fam = PreArrayFamily::random(1, 5, 2);
    assert!(fd_svd_oracle(|t| fam.at(t), 1.0, 0.0).is_err());
}

#[test]
fn dimension_vector_handling() {
    // column vectors (s = 1) exercise the k x 1 path end to end
    let a = DMatrix::from_column_slice(3, 1, &[3.0, 4.0, 0.0]);
    let t = svd_factorize(&a).unwrap();
    assert!((t.s[0] - 5.0).abs() < 1e-12);
    let d = differentiated_svd(&a, &DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0])).unwrap();
    // d|A|/dA . A' = (3/5)
    assert!((d.s_prime[0] - 0.6).abs() < 1e-12);
    assert!(d.v_prime[(0, 0)].abs() < 1e-14);
}

#[test]
fn fd_oracle_handles_descending_reorder() {
    // singular values cross near t = 1; probe away from the crossing on
    // both sides and check the analytic derivative still matches
    let fam = |t: f64| {
        DMatrix::from_row_slice(2, 2, &[1.0 + 0.5 * t, 0.0, 0.0, 2.0 - 0.5 * t])
    };
    let deriv = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -0.5]);
    for t0 in [0.3, 1.7] {
        let d = differentiated_svd(&fam(t0), &deriv).unwrap();
        let fd = fd_svd_oracle(fam, t0, 1e-7).unwrap();
        for i in 0..2 {
            assert!((d.s_prime[i] - fd.s_prime_fd[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn near_crossing_with_rotation_is_an_error() {
    // at t = 1 the two singular values collide while the derivative rotates
    // the singular directions; there is no differentiable branch
    let a = DVector::from_vec(vec![1.5, 1.5]);
    let a = DMatrix::from_diagonal(&a);
    let ap = DMatrix::from_row_slice(2, 2, &[0.0, 0.7, 0.7, 0.0]);
    assert!(differentiated_svd(&a, &ap).is_err());
}
