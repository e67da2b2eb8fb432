//! Negative log-likelihood, analytic gradients, and the ML estimator.
//!
//! The innovations-form negative log-likelihood is
//!
//! ```text
//! L = c0 + 1/2 sum_k { ln det Re_k + e_k^T Re_k^{-1} e_k },
//! c0 = (N m / 2) ln(2 pi)
//! ```
//!
//! and is evaluated here in two algebraically equivalent ways: from the
//! conventional trace directly, and from the factored trace as
//! `ln det D_k + ebar_k^T D_k^{-1} ebar_k` with the rotated innovation
//! `ebar = Q_Re^T e` (the rotation is orthogonal, so determinants and
//! quadratic forms are unchanged). Gradients follow by the chain rule with
//! `d(D^{-1}) = -D^{-1} dD D^{-1}`; the constant `c0` is included in values
//! and cancels in gradients.
//!
//! The sign convention is fixed once: this module always *minimizes* the
//! negative log-likelihood.

mod optimizer;

pub use optimizer::{estimate, minimize, Engine, EstimateOptions, IterationRecord, OptimizerReport};

use nalgebra::{Cholesky, DVector};

use crate::error::{Error, Result};
use crate::filters::{svd_kf_run, DiffKfTrace, DiffSvdKfTrace, KfTrace, SvdKfTrace};
use crate::model::{init_factors, ParametrizedModel, Trajectory};
use crate::svd_diff::SvdFactors;

const LN_2PI: f64 = 1.8378770664093453;

fn c0(steps: usize, m: usize) -> f64 {
    0.5 * (steps * m) as f64 * LN_2PI
}

fn svd_nll_core<'a>(
    items: impl Iterator<Item = (&'a DVector<f64>, &'a SvdFactors)>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut steps = 0usize;
    let mut m = 0usize;
    for (ebar, re) in items {
        let d = re.d();
        if d.iter().any(|&x| x <= 0.0) {
            return Err(Error::ZeroSingularValue);
        }
        let logdet: f64 = d.iter().map(|x| x.ln()).sum();
        let quad: f64 = ebar.iter().zip(d.iter()).map(|(e, d)| e * e / d).sum();
        sum += logdet + quad;
        steps += 1;
        m = ebar.len();
    }
    Ok(c0(steps, m) + 0.5 * sum)
}

/// Negative log-likelihood from a factored filter trace.
pub fn nll_svd(trace: &SvdKfTrace) -> Result<f64> {
    svd_nll_core(
        trace
            .steps
            .iter()
            .map(|s| (&s.rotated_innovation, &s.re)),
    )
}

/// Negative log-likelihood from a factored sensitivity trace.
pub fn nll_diff_svd(trace: &DiffSvdKfTrace) -> Result<f64> {
    svd_nll_core(
        trace
            .steps
            .iter()
            .map(|s| (&s.base.rotated_innovation, &s.base.re)),
    )
}

fn conventional_nll_core<'a>(
    items: impl Iterator<Item = (&'a DVector<f64>, &'a nalgebra::DMatrix<f64>)>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut steps = 0usize;
    let mut m = 0usize;
    for (e, re) in items {
        steps += 1;
        m = e.len();
        let chol =
            Cholesky::new(re.clone()).ok_or(Error::SingularInnovationCovariance { step: steps })?;
        let logdet: f64 = (0..m).map(|i| 2.0 * chol.l()[(i, i)].ln()).sum();
        let solved = chol.solve(e);
        sum += logdet + e.dot(&solved);
    }
    Ok(c0(steps, m) + 0.5 * sum)
}

/// Negative log-likelihood from a conventional filter trace.
pub fn nll_conventional(trace: &KfTrace) -> Result<f64> {
    conventional_nll_core(
        trace
            .steps
            .iter()
            .map(|s| (&s.innovation, &s.innovation_cov)),
    )
}

/// Negative log-likelihood from a conventional sensitivity trace.
pub fn nll_diff_conventional(trace: &DiffKfTrace) -> Result<f64> {
    conventional_nll_core(
        trace
            .steps
            .iter()
            .map(|s| (&s.base.innovation, &s.base.innovation_cov)),
    )
}

/// Analytic gradient of the negative log-likelihood from a factored
/// sensitivity trace:
///
/// ```text
/// dL_i = 1/2 sum_k { tr(dD D^{-1}) + 2 debar^T D^{-1} ebar
///                    - ebar^T D^{-1} dD D^{-1} ebar }
/// ```
///
/// with `dD = 2 D^{1/2} dD^{1/2}` elementwise on the diagonals.
pub fn grad_nll_svd(trace: &DiffSvdKfTrace) -> Result<DVector<f64>> {
    let Some(first) = trace.steps.first() else {
        return Err(Error::ShapeMismatch("empty trace".into()));
    };
    let p = first.dx_pred.len();
    let mut grad = DVector::zeros(p);
    for step in &trace.steps {
        let d = step.base.re.d();
        if d.iter().any(|&x| x <= 0.0) {
            return Err(Error::ZeroSingularValue);
        }
        let ebar = &step.base.rotated_innovation;
        for i in 0..p {
            let dd = step
                .base
                .re
                .d_sqrt
                .zip_map(&step.dd_sqrt_re[i], |s, ds| 2.0 * s * ds);
            let debar = &step.d_rotated_innovation[i];
            let mut term = 0.0;
            for j in 0..d.len() {
                term += dd[j] / d[j];
                term += 2.0 * debar[j] * ebar[j] / d[j];
                term -= ebar[j] * ebar[j] * dd[j] / (d[j] * d[j]);
            }
            grad[i] += 0.5 * term;
        }
    }
    Ok(grad)
}

/// Analytic gradient of the negative log-likelihood from a conventional
/// sensitivity trace:
///
/// ```text
/// dL_i = 1/2 sum_k { tr(Re^{-1} dRe) + 2 de^T Re^{-1} e
///                    - e^T Re^{-1} dRe Re^{-1} e }
/// ```
pub fn grad_nll_conventional(trace: &DiffKfTrace) -> Result<DVector<f64>> {
    let Some(first) = trace.steps.first() else {
        return Err(Error::ShapeMismatch("empty trace".into()));
    };
    let p = first.dx_pred.len();
    let mut grad = DVector::zeros(p);
    for (k, step) in trace.steps.iter().enumerate() {
        let chol = Cholesky::new(step.base.innovation_cov.clone())
            .ok_or(Error::SingularInnovationCovariance { step: k + 1 })?;
        let re_inv = chol.inverse();
        let e = &step.base.innovation;
        let re_inv_e = &re_inv * e;
        for i in 0..p {
            let dre = &step.d_innovation_cov[i];
            let de = &step.d_innovation[i];
            let term = (&re_inv * dre).trace() + 2.0 * de.dot(&re_inv_e)
                - re_inv_e.dot(&(dre * &re_inv_e));
            grad[i] += 0.5 * term;
        }
    }
    Ok(grad)
}

/// Central-difference gradient oracle: evaluates the factored-filter
/// likelihood at `theta +- h e_i` on the same data and differences.
/// Independent of the sensitivity recursions.
pub fn fd_gradient_oracle(
    model: &ParametrizedModel,
    data: &Trajectory,
    theta: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    if h <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let nll_at = |theta: &DVector<f64>| -> Result<f64> {
        let inst = model.evaluate(theta)?;
        let fac = init_factors(&inst, model.factor_supply())?;
        let trace = svd_kf_run(&inst, &fac, data)?;
        nll_svd(&trace)
    };
    let p = theta.len();
    let mut grad = DVector::zeros(p);
    for i in 0..p {
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[i] += h;
        tm[i] -= h;
        // realized step, so the quantization of theta_i +- h cancels
        let span = tp[i] - tm[i];
        grad[i] = (nll_at(&tp)? - nll_at(&tm)?) / span;
    }
    Ok(grad)
}
