//! SVD factorization of tall pre-arrays and propagation of parameter
//! derivatives through the factorization.
//!
//! Array-form filters repeatedly factor a stacked "pre-array" `A` of shape
//! `(k+s) x s` as `A = W [S; 0] V^T` and read updated covariance factors off
//! the post-arrays `S` and `V`. Given the pre-array derivative `A'` with
//! respect to a scalar parameter, [`differentiated_svd`] computes the
//! post-array derivatives `S'` and `V'` on the same factorization branch,
//! without ever forming `W'`:
//!
//! * `S'` is the diagonal of the leading `s x s` block `M = W^T A' V`;
//! * `V' = V (L2^T - L2)`, where the strictly lower triangular `L2` solves
//!   the coupling system assembled from the off-diagonal parts of `M`
//!   (see [`solve_lbar2`]).
//!
//! The factorization branch is pinned by sorting singular values in
//! descending order and flipping column signs so that the largest-magnitude
//! entry of every `V` column is positive. Derivatives are only meaningful on
//! a fixed smooth branch, so both [`svd_factorize`] and the derivative
//! read-offs apply the same convention.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative rank tolerance: a pre-array is rank deficient when
/// `sigma_min <= RANK_TOL * sigma_max`.
pub const RANK_TOL: f64 = 1e-12;

/// Relative tolerance on `|sigma_i^2 - sigma_j^2|` (against `sigma_max^2`)
/// below which a pair of singular values is treated as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-9;

/// Relative tolerance on the coupling-system numerator used to decide whether
/// a degenerate pair is consistent (a differentiable branch exists and the
/// in-subspace rotation rate can be gauged to zero) or a genuine error.
pub const DEGENERACY_NUM_TOL: f64 = 1e-6;

/// Relative symmetry tolerance for [`sym_spectral_factors`].
pub const SYM_TOL_REL: f64 = 1e-8;

/// Relative tolerance on negative eigenvalues for [`sym_spectral_factors`];
/// round-off negatives above it are clamped to zero.
pub const PSD_TOL_REL: f64 = 1e-8;

/// Full SVD of a tall pre-array: `A = W [S; 0] V^T`.
///
/// `W` is square `(k+s) x (k+s)`, `S` holds the `s` singular values in
/// descending order, and `V` is `s x s`.
#[derive(Debug, Clone)]
pub struct SvdTriple {
    pub w: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl SvdTriple {
    /// Rebuilds `W [S; 0] V^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let (rows, s_dim) = (self.w.nrows(), self.s.len());
        let mut sigma = DMatrix::zeros(rows, s_dim);
        for i in 0..s_dim {
            sigma[(i, i)] = self.s[i];
        }
        &self.w * sigma * self.v.transpose()
    }
}

/// Post-arrays and their derivatives from one differentiated factorization.
#[derive(Debug, Clone)]
pub struct DiffSvdResult {
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
    /// Derivatives of the singular values.
    pub s_prime: DVector<f64>,
    /// Derivative of the right factor on the fixed branch.
    pub v_prime: DMatrix<f64>,
}

/// Split of a square matrix into strictly lower, diagonal and strictly upper parts.
#[derive(Debug, Clone)]
pub struct TriangularSplit {
    pub lbar: DMatrix<f64>,
    pub d: DVector<f64>,
    pub ubar: DMatrix<f64>,
}

impl TriangularSplit {
    /// `lbar + diag(d) + ubar`; reconstructs the split matrix exactly.
    pub fn reassemble(&self) -> DMatrix<f64> {
        let mut out = &self.lbar + &self.ubar;
        for i in 0..self.d.len() {
            out[(i, i)] += self.d[i];
        }
        out
    }
}

/// Splits a square matrix into strictly lower, diagonal, strictly upper parts.
pub fn split_triangular(m: &DMatrix<f64>) -> TriangularSplit {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    let mut lbar = DMatrix::zeros(n, n);
    let mut ubar = DMatrix::zeros(n, n);
    let mut d = DVector::zeros(n);
    for i in 0..n {
        for j in 0..n {
            match i.cmp(&j) {
                std::cmp::Ordering::Greater => lbar[(i, j)] = m[(i, j)],
                std::cmp::Ordering::Equal => d[i] = m[(i, i)],
                std::cmp::Ordering::Less => ubar[(i, j)] = m[(i, j)],
            }
        }
    }
    TriangularSplit { lbar, d, ubar }
}

/// An orthogonal/diagonal factor pair `{Q, D^{1/2}}` representing a
/// symmetric positive semi-definite matrix `P = Q D Q^T` with `D = (D^{1/2})^2`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub q: DMatrix<f64>,
    pub d_sqrt: DVector<f64>,
}

impl SvdFactors {
    pub fn dim(&self) -> usize {
        self.d_sqrt.len()
    }

    /// Diagonal of `D`, the squares of the stored square roots.
    pub fn d(&self) -> DVector<f64> {
        self.d_sqrt.map(|x| x * x)
    }

    /// Materializes `Q D Q^T`. Intended for diagnostics and cross-checks;
    /// the filter recursions never consume the product.
    pub fn to_covariance(&self) -> DMatrix<f64> {
        linalg::quad_diag(&self.q, &self.d())
    }
}

/// Sorts singular values in descending order and makes the largest-magnitude
/// entry of each `V` column positive (ties broken by the first such entry),
/// mirroring every column flip onto `u`.
fn sort_and_fix_signs(u: &mut DMatrix<f64>, s: &mut DVector<f64>, v: &mut DMatrix<f64>) {
    let n = s.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).expect("finite singular values"));
    let su = u.clone_owned();
    let sv = v.clone_owned();
    let ss = s.clone_owned();
    for (new, &old) in order.iter().enumerate() {
        u.set_column(new, &su.column(old));
        v.set_column(new, &sv.column(old));
        s[new] = ss[old];
    }
    for j in 0..n {
        let col = v.column(j);
        let mut arg = 0;
        let mut best = col[0].abs();
        for (idx, val) in col.iter().enumerate().skip(1) {
            if val.abs() > best {
                best = val.abs();
                arg = idx;
            }
        }
        if v[(arg, j)] < 0.0 {
            v.column_mut(j).neg_mut();
            u.column_mut(j).neg_mut();
        }
    }
}

/// Factors a full-column-rank pre-array `A` ((k+s) x s, k >= 0) as
/// `A = W [S; 0] V^T` with `W` completed to a full orthogonal basis.
///
/// The backend decomposition is treated as an opaque backward-stable routine;
/// the descending order and the column-sign convention are re-applied here
/// after every call so the output branch is deterministic.
pub fn svd_factorize(a: &DMatrix<f64>) -> Result<SvdTriple> {
    let (rows, cols) = a.shape();
    if cols == 0 || rows < cols {
        return Err(Error::ShapeMismatch(format!(
            "pre-array must be tall with at least one column, got {rows}x{cols}"
        )));
    }
    if !linalg::all_finite_mat(a) {
        return Err(Error::NumericalFailure("non-finite pre-array entries"));
    }
    let svd = SVD::try_new(a.clone(), true, true, f64::EPSILON, 0)
        .ok_or(Error::NumericalFailure("svd backend did not converge"))?;
    let mut u = svd.u.expect("u requested");
    let mut s = svd.singular_values;
    let mut v = svd.v_t.expect("v requested").transpose();
    sort_and_fix_signs(&mut u, &mut s, &mut v);
    let sigma_max = s[0];
    let sigma_min = s[cols - 1];
    if sigma_min <= RANK_TOL * sigma_max {
        return Err(Error::RankDeficient { sigma_min, sigma_max });
    }
    let w = if rows == cols {
        u
    } else {
        linalg::complete_orthonormal_basis(&u)
    };
    Ok(SvdTriple { w, s, v })
}

/// Solves the factor-derivative coupling system for the strictly lower
/// triangular `L2`, entrywise
/// `(l2)_ij = (u_ji s_j + l_ij s_i) / (s_i^2 - s_j^2)` for `i > j`.
///
/// A pair with `|s_i^2 - s_j^2|` below the degeneracy tolerance is accepted
/// only when its numerator also vanishes (an identically degenerate pair on
/// a differentiable branch); the in-subspace rotation rate is then gauged to
/// zero, which leaves every downstream covariance-level derivative unchanged.
/// A degenerate pair with a non-vanishing numerator has no differentiable
/// branch and is reported as [`Error::DegenerateSingularValues`].
pub fn solve_lbar2(
    lbar: &DMatrix<f64>,
    ubar: &DMatrix<f64>,
    s: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = s.len();
    if lbar.shape() != (n, n) || ubar.shape() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "triangular parts must be {n}x{n} to match {n} singular values"
        )));
    }
    let sigma_max = s.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let gap_tol = DEGENERACY_TOL * sigma_max * sigma_max;
    let m_scale = lbar.amax().max(ubar.amax());
    let num_tol = DEGENERACY_NUM_TOL * sigma_max * (1.0 + m_scale);
    let mut l2 = DMatrix::zeros(n, n);
    for i in 1..n {
        for j in 0..i {
            let den = s[i] * s[i] - s[j] * s[j];
            let num = ubar[(j, i)] * s[j] + lbar[(i, j)] * s[i];
            if den.abs() <= gap_tol {
                if num.abs() <= num_tol {
                    l2[(i, j)] = 0.0;
                } else {
                    return Err(Error::DegenerateSingularValues {
                        gap: den.abs(),
                        tol: gap_tol,
                    });
                }
            } else {
                l2[(i, j)] = num / den;
            }
        }
    }
    Ok(l2)
}

/// Differentiated factorization reusing an existing [`SvdTriple`] of `A`.
pub fn differentiated_svd_with(triple: &SvdTriple, a_prime: &DMatrix<f64>) -> Result<DiffSvdResult> {
    let s_dim = triple.v.nrows();
    if a_prime.shape() != (triple.w.nrows(), s_dim) {
        return Err(Error::ShapeMismatch(format!(
            "pre-array derivative must be {}x{}, got {}x{}",
            triple.w.nrows(),
            s_dim,
            a_prime.nrows(),
            a_prime.ncols()
        )));
    }
    // Leading s x s block of W^T A' V; only the first s columns of W matter.
    let m = triple.w.columns(0, s_dim).transpose() * a_prime * &triple.v;
    let split = split_triangular(&m);
    let l2 = solve_lbar2(&split.lbar, &split.ubar, &triple.s)?;
    let lambda = l2.transpose() - &l2;
    let v_prime = &triple.v * lambda;
    Ok(DiffSvdResult {
        s: triple.s.clone(),
        v: triple.v.clone(),
        s_prime: split.d,
        v_prime,
    })
}

/// Factors `A` and computes the post-array derivatives `S'`, `V'` from the
/// pre-array derivative `A'`. The left factor derivative is never needed by
/// the filter recursions and is not computed.
pub fn differentiated_svd(a: &DMatrix<f64>, a_prime: &DMatrix<f64>) -> Result<DiffSvdResult> {
    let triple = svd_factorize(a)?;
    differentiated_svd_with(&triple, a_prime)
}

/// Spectral factorization `P = Q D Q^T` of a symmetric positive
/// semi-definite matrix, with `D` descending and round-off negative
/// eigenvalues clamped to zero.
pub fn sym_spectral_factors(p: &DMatrix<f64>) -> Result<SvdFactors> {
    let n = p.nrows();
    if p.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "spectral factorization needs a square matrix, got {}x{}",
            n,
            p.ncols()
        )));
    }
    if !linalg::all_finite_mat(p) {
        return Err(Error::NumericalFailure("non-finite matrix entries"));
    }
    let scale = 1.0 + p.amax();
    let asymmetry = linalg::max_abs_diff(p, &p.transpose());
    if asymmetry > SYM_TOL_REL * scale {
        return Err(Error::NotSymmetric { asymmetry });
    }
    let sym = 0.5 * (p + p.transpose());
    let eig = sym
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or(Error::NumericalFailure("symmetric eigensolver did not converge"))?;
    let mut vals = eig.eigenvalues;
    let mut q = eig.eigenvectors;
    let min_eig = vals.min();
    if min_eig < -PSD_TOL_REL * scale {
        return Err(Error::NotPsd { min_eigenvalue: min_eig });
    }
    vals = vals.map(|x| x.max(0.0));
    // same ordering and sign convention as the pre-array factorization;
    // the mirrored "u" flips land on a discarded copy.
    let mut unused = q.clone();
    sort_and_fix_signs(&mut unused, &mut vals, &mut q);
    Ok(SvdFactors {
        q,
        d_sqrt: vals.map(f64::sqrt),
    })
}

/// Central-difference derivatives of the post-array factors of a pre-array
/// family `theta -> A(theta)`.
#[derive(Debug, Clone)]
pub struct FdSvdDerivatives {
    pub s_prime_fd: DVector<f64>,
    pub v_prime_fd: DMatrix<f64>,
}

/// Finite-difference oracle for the factor derivatives: factors `A(theta +- h)`,
/// sign-aligns the `V` columns to the branch at `theta`, and differences.
///
/// Independent of the derivative path: only [`svd_factorize`] is consulted.
pub fn fd_svd_oracle(
    a_of_theta: impl Fn(f64) -> DMatrix<f64>,
    theta: f64,
    h: f64,
) -> Result<FdSvdDerivatives> {
    if h <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    // divide by the realized step so the quantization of theta +- h does not
    // pollute the quotient
    let theta_plus = theta + h;
    let theta_minus = theta - h;
    let span = theta_plus - theta_minus;
    let center = svd_factorize(&a_of_theta(theta))?;
    let plus = svd_factorize(&a_of_theta(theta_plus))?;
    let minus = svd_factorize(&a_of_theta(theta_minus))?;
    let mut v_plus = plus.v;
    let mut v_minus = minus.v;
    for j in 0..center.v.ncols() {
        if v_plus.column(j).dot(&center.v.column(j)) < 0.0 {
            v_plus.column_mut(j).neg_mut();
        }
        if v_minus.column(j).dot(&center.v.column(j)) < 0.0 {
            v_minus.column_mut(j).neg_mut();
        }
    }
    Ok(FdSvdDerivatives {
        s_prime_fd: (plus.s - minus.s) / span,
        v_prime_fd: (v_plus - v_minus) / span,
    })
}

/// A 5x2 pre-array family with trigonometric and polynomial entries.
///
/// Exercises every part of the differentiated factorization (distinct
/// singular values, dense coupling) and backs the `example1` CLI report and
/// several validation tests.
pub mod demo {
    use nalgebra::DMatrix;

    /// `A(theta)`.
    pub fn pre_array(theta: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            5,
            2,
            &[
                -2.0 * theta,
                theta.sin(),
                2.0 * theta,
                theta * theta,
                theta.sin().powi(2),
                theta.powi(3) / 3.0,
                theta,
                2.0 * theta * theta - 1.0,
                theta.cos().powi(2),
                theta.powi(3) + theta * theta,
            ],
        )
    }

    /// `dA/dtheta`.
    pub fn pre_array_derivative(theta: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            5,
            2,
            &[
                -2.0,
                theta.cos(),
                2.0,
                2.0 * theta,
                (2.0 * theta).sin(),
                theta * theta,
                1.0,
                4.0 * theta,
                -(2.0 * theta).sin(),
                3.0 * theta * theta + 2.0 * theta,
            ],
        )
    }
}
