//! Initialization of covariance factors `{Q, D^{1/2}}` and their parameter
//! derivatives for the three model covariances (process noise, measurement
//! noise, initial state).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::ModelInstance;
use crate::svd_diff::{
    differentiated_svd_with, svd_factorize, sym_spectral_factors, SvdFactors, DEGENERACY_TOL,
};

/// Analytic factors of one covariance at a given `theta`: `M = Q D Q^T` with
/// `D = diag(d_sqrt)^2`, plus the `p` partial derivatives of each factor.
#[derive(Debug, Clone)]
pub struct AnalyticFactors {
    pub q: DMatrix<f64>,
    pub d_sqrt: DVector<f64>,
    pub dq: Vec<DMatrix<f64>>,
    pub dd_sqrt: Vec<DVector<f64>>,
}

type AnalyticFactorFn = dyn Fn(&DVector<f64>) -> AnalyticFactors + Send + Sync;

/// How the factors of one covariance are obtained.
#[derive(Clone)]
pub enum FactorSpec {
    /// Factor the covariance numerically and differentiate the factorization.
    /// Requires pairwise-distinct eigenvalues.
    Computed,
    /// User-supplied closed-form factors and factor derivatives. Required
    /// when the covariance has repeated eigenvalues.
    Analytic(Arc<AnalyticFactorFn>),
}

impl FactorSpec {
    pub fn analytic(
        f: impl Fn(&DVector<f64>) -> AnalyticFactors + Send + Sync + 'static,
    ) -> Self {
        FactorSpec::Analytic(Arc::new(f))
    }
}

/// Factor sources for the three model covariances.
#[derive(Clone)]
pub struct FactorSupply {
    pub omega: FactorSpec,
    pub r: FactorSpec,
    pub pi0: FactorSpec,
}

impl Default for FactorSupply {
    fn default() -> Self {
        Self {
            omega: FactorSpec::Computed,
            r: FactorSpec::Computed,
            pi0: FactorSpec::Computed,
        }
    }
}

/// Factors of one covariance together with their `p` partial derivatives.
#[derive(Debug, Clone)]
pub struct FactorWithDerivs {
    pub factors: SvdFactors,
    pub dq: Vec<DMatrix<f64>>,
    pub dd_sqrt: Vec<DVector<f64>>,
}

/// Initialized factors for the process noise, measurement noise and initial
/// state covariances, as consumed by the factored filter recursions.
#[derive(Debug, Clone)]
pub struct InitFactors {
    pub omega: FactorWithDerivs,
    pub r: FactorWithDerivs,
    pub pi0: FactorWithDerivs,
}

/// Produces `{Q, D^{1/2}}` factors plus derivatives for the three model
/// covariances, using either the supplied analytic factors or the computed
/// factorization path.
pub fn init_factors(instance: &ModelInstance, supply: &FactorSupply) -> Result<InitFactors> {
    let p = instance.dims.p;
    let omega_partials: Vec<&DMatrix<f64>> =
        instance.partials.iter().map(|d| &d.omega).collect();
    let r_partials: Vec<&DMatrix<f64>> = instance.partials.iter().map(|d| &d.r).collect();
    let pi0_partials: Vec<&DMatrix<f64>> = instance.partials.iter().map(|d| &d.pi0).collect();
    Ok(InitFactors {
        omega: one_factor(&supply.omega, &instance.theta, &instance.mats.omega, &omega_partials, p)?,
        r: one_factor(&supply.r, &instance.theta, &instance.mats.r, &r_partials, p)?,
        pi0: one_factor(&supply.pi0, &instance.theta, &instance.mats.pi0, &pi0_partials, p)?,
    })
}

fn one_factor(
    spec: &FactorSpec,
    theta: &DVector<f64>,
    matrix: &DMatrix<f64>,
    partials: &[&DMatrix<f64>],
    p: usize,
) -> Result<FactorWithDerivs> {
    match spec {
        FactorSpec::Analytic(f) => {
            let supplied = f(theta);
            validate_analytic(&supplied, matrix, partials, p)?;
            Ok(FactorWithDerivs {
                factors: SvdFactors {
                    q: supplied.q,
                    d_sqrt: supplied.d_sqrt,
                },
                dq: supplied.dq,
                dd_sqrt: supplied.dd_sqrt,
            })
        }
        FactorSpec::Computed => computed_factor(matrix, partials, p),
    }
}

fn validate_analytic(
    supplied: &AnalyticFactors,
    matrix: &DMatrix<f64>,
    partials: &[&DMatrix<f64>],
    p: usize,
) -> Result<()> {
    let n = matrix.nrows();
    if supplied.q.shape() != (n, n) || supplied.d_sqrt.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "analytic factors must be {n}x{n} with {n} diagonal entries"
        )));
    }
    if supplied.dq.len() != p || supplied.dd_sqrt.len() != p {
        return Err(Error::ShapeMismatch(format!(
            "analytic factors must carry {p} derivative sets"
        )));
    }
    let scale = 1.0 + matrix.amax();
    let ortho = linalg::orthogonality_residual(&supplied.q);
    if ortho > 1e-8 * scale {
        return Err(Error::InconsistentFactors { residual: ortho });
    }
    let rebuilt = linalg::quad_diag(&supplied.q, &supplied.d_sqrt.map(|x| x * x));
    let residual = linalg::max_abs_diff(&rebuilt, matrix);
    if residual > 1e-10 * scale {
        return Err(Error::InconsistentFactors { residual });
    }
    // d(Q D Q^T) assembled from the supplied factor derivatives must match
    // the generator's matrix derivative.
    let d = supplied.d_sqrt.map(|x| x * x);
    let qd = linalg::scale_columns(&supplied.q, &d);
    for ((dq, dd_sqrt), partial) in supplied.dq.iter().zip(&supplied.dd_sqrt).zip(partials) {
        let dd = supplied.d_sqrt.zip_map(dd_sqrt, |s, ds| 2.0 * s * ds);
        let term1 = linalg::scale_columns(dq, &d) * supplied.q.transpose();
        let term2 = linalg::scale_columns(&supplied.q, &dd) * supplied.q.transpose();
        let term3 = &qd * dq.transpose();
        let rebuilt_d = term1 + term2 + term3;
        let dres = linalg::max_abs_diff(&rebuilt_d, partial);
        let dscale = 1.0 + partial.amax();
        if dres > 1e-8 * dscale {
            return Err(Error::InconsistentFactors { residual: dres });
        }
    }
    Ok(())
}

/// Computed path: spectral validation, then the covariance is factored as
/// its own pre-array and the factorization is differentiated.
///
/// A covariance that is exactly zero gets exactly-zero factors, provided its
/// derivative is zero as well (the square-root factor of a vanishing matrix
/// has no finite derivative otherwise).
fn computed_factor(
    matrix: &DMatrix<f64>,
    partials: &[&DMatrix<f64>],
    p: usize,
) -> Result<FactorWithDerivs> {
    let n = matrix.nrows();
    if matrix.amax() == 0.0 {
        for part in partials {
            if part.amax() != 0.0 {
                return Err(Error::RankDeficient {
                    sigma_min: 0.0,
                    sigma_max: 0.0,
                });
            }
        }
        return Ok(FactorWithDerivs {
            factors: SvdFactors {
                q: DMatrix::identity(n, n),
                d_sqrt: DVector::zeros(n),
            },
            dq: (0..p).map(|_| DMatrix::zeros(n, n)).collect(),
            dd_sqrt: (0..p).map(|_| DVector::zeros(n)).collect(),
        });
    }
    // validates symmetry and positive semi-definiteness
    sym_spectral_factors(matrix)?;
    let triple = svd_factorize(matrix)?;
    let s_dim = triple.s.len();
    let sigma_max2 = triple.s[0] * triple.s[0];
    for i in 0..s_dim {
        for j in (i + 1)..s_dim {
            let gap = (triple.s[i] * triple.s[i] - triple.s[j] * triple.s[j]).abs();
            if gap <= DEGENERACY_TOL * sigma_max2 {
                return Err(Error::DegenerateSingularValues {
                    gap,
                    tol: DEGENERACY_TOL * sigma_max2,
                });
            }
        }
    }
    let mut dq = Vec::with_capacity(p);
    let mut dd_sqrt = Vec::with_capacity(p);
    for part in partials {
        let diff = differentiated_svd_with(&triple, part)?;
        dd_sqrt.push(
            diff.s_prime
                .zip_map(&triple.s, |sp, s| sp / (2.0 * s.sqrt())),
        );
        dq.push(diff.v_prime);
    }
    Ok(FactorWithDerivs {
        factors: SvdFactors {
            q: triple.v,
            d_sqrt: triple.s.map(f64::sqrt),
        },
        dq,
        dd_sqrt,
    })
}

/// Convenience: analytic factors for a covariance that is a fixed diagonal
/// matrix scaled by a smooth scalar `c(theta)^2`, i.e. `M = c^2 diag(base)`.
pub(crate) fn scaled_diagonal_factors(
    base: DVector<f64>,
    c: f64,
    dc: &[f64],
) -> AnalyticFactors {
    let n = base.len();
    let d_sqrt = base.map(|b| b.sqrt() * c.abs());
    let sign = if c < 0.0 { -1.0 } else { 1.0 };
    AnalyticFactors {
        q: DMatrix::identity(n, n),
        d_sqrt,
        dq: dc.iter().map(|_| DMatrix::zeros(n, n)).collect(),
        dd_sqrt: dc
            .iter()
            .map(|&dci| base.map(|b| b.sqrt() * sign * dci))
            .collect(),
    }
}
