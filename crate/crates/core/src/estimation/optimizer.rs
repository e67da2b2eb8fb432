//! Quasi-Newton minimizer and the maximum-likelihood estimator built on it.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::estimation::{
    grad_nll_conventional, grad_nll_svd, nll_diff_conventional, nll_diff_svd,
};
use crate::filters::{diff_kf_run, diff_svd_kf_run};
use crate::linalg::all_finite_vec;
use crate::model::{init_factors, ParametrizedModel, Trajectory};

/// Which sensitivity engine supplies likelihood values and gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    /// Conventional filter with direct sensitivity recursions.
    DiffKf,
    /// Factored filter with factor-derivative recursions.
    DiffSvdKf,
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Engine::DiffKf => write!(f, "diff_kf"),
            Engine::DiffSvdKf => write!(f, "diff_svd_kf"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    /// Stop when the max-norm of the gradient falls below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Backtracking shrink factor.
    pub shrink: f64,
    /// Stop when the accepted step is shorter than this.
    pub min_step: f64,
    /// Trial steps are capped at `max_step_scale * (1 + |theta|)`; keeps the
    /// first iterations from overshooting into flat or concave far fields
    /// where the quasi-Newton update cannot recover.
    pub max_step_scale: f64,
    pub engine: Engine,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iter: 100,
            armijo_c: 1e-4,
            shrink: 0.5,
            min_step: 1e-12,
            max_step_scale: 2.0,
            engine: Engine::DiffSvdKf,
        }
    }
}

/// One accepted optimizer iterate.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub theta: DVector<f64>,
    pub nll: f64,
    pub grad_norm: f64,
    pub step_len: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizerReport {
    pub theta_hat: DVector<f64>,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub line_search_failures: usize,
    /// True when the gradient tolerance was met, or when the iterate stopped
    /// moving (step below the minimum length, or no acceptable step left)
    /// after at least one accepted descent step. On ill-conditioned problems
    /// the achievable gradient norm is limited by evaluation noise, so
    /// stagnation in `theta` is the meaningful convergence signal there.
    /// Runs that hit the iteration cap or cannot take a single step are not
    /// converged. A report with `converged == false` is still complete;
    /// callers treat it as a failed estimate.
    pub converged: bool,
    pub history: Vec<IterationRecord>,
}

impl OptimizerReport {
    /// Iteration history as CSV: `iter, theta_0.., nll, grad_norm, step_len`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let p = self.theta_hat.len();
        let mut header = String::from("iter");
        for i in 0..p {
            header.push_str(&format!(",theta_{i}"));
        }
        header.push_str(",nll,grad_norm,step_len");
        writeln!(out, "{header}")?;
        for (it, rec) in self.history.iter().enumerate() {
            let mut line = format!("{it}");
            for v in rec.theta.iter() {
                line.push_str(&format!(",{v:.12e}"));
            }
            line.push_str(&format!(
                ",{:.12e},{:.12e},{:.12e}",
                rec.nll, rec.grad_norm, rec.step_len
            ));
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// BFGS with Armijo backtracking.
///
/// The objective returns `None` when it cannot be evaluated (a failed filter
/// run, for instance); during a line search that counts as a rejected trial
/// point and the step shrinks. A failed line search along a quasi-Newton
/// direction resets the inverse Hessian to the identity and retries along
/// the steepest descent direction before giving up.
pub fn minimize(
    mut objective: impl FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
    theta0: &DVector<f64>,
    opts: &EstimateOptions,
) -> OptimizerReport {
    let p = theta0.len();
    let mut history = Vec::new();
    let first = objective(theta0)
        .filter(|(value, grad)| value.is_finite() && all_finite_vec(grad));
    let Some((mut fx, mut gx)) = first else {
        return OptimizerReport {
            theta_hat: theta0.clone(),
            iterations: 0,
            final_grad_norm: f64::INFINITY,
            line_search_failures: 0,
            converged: false,
            history,
        };
    };
    let mut x = theta0.clone();
    history.push(IterationRecord {
        theta: x.clone(),
        nll: fx,
        grad_norm: gx.amax(),
        step_len: 0.0,
    });
    let mut h_inv = DMatrix::<f64>::identity(p, p);
    let mut h_is_identity = true;
    let mut iterations = 0usize;
    let mut line_search_failures = 0usize;
    let mut converged = gx.amax() <= opts.grad_tol;

    while !converged && iterations < opts.max_iter {
        let mut dir = -(&h_inv * &gx);
        let mut slope = dir.dot(&gx);
        if slope >= 0.0 {
            h_inv = DMatrix::identity(p, p);
            h_is_identity = true;
            dir = -gx.clone();
            slope = dir.dot(&gx);
        }

        let step_cap = opts.max_step_scale * (1.0 + x.norm());
        let dir_norm = dir.norm();
        let mut alpha = if dir_norm > step_cap {
            step_cap / dir_norm
        } else {
            1.0
        };
        let mut accepted = None;
        while alpha * dir.amax() >= opts.min_step {
            let cand = &x + alpha * &dir;
            if let Some((fc, gc)) = objective(&cand) {
                if fc.is_finite()
                    && all_finite_vec(&gc)
                    && fc <= fx + opts.armijo_c * alpha * slope
                {
                    accepted = Some((cand, fc, gc, alpha));
                    break;
                }
            }
            alpha *= opts.shrink;
        }

        let Some((x_new, f_new, g_new, alpha)) = accepted else {
            line_search_failures += 1;
            if h_is_identity {
                // no acceptable step even along steepest descent: the
                // iterate has stopped moving
                converged = iterations >= 1;
                break;
            }
            h_inv = DMatrix::identity(p, p);
            h_is_identity = true;
            continue;
        };

        iterations += 1;
        let step = alpha * &dir;
        let step_len = step.norm();
        let y = &g_new - &gx;
        let sy = step.dot(&y);
        if sy > 1e-10 * step.norm() * y.norm() {
            let rho = 1.0 / sy;
            let id = DMatrix::<f64>::identity(p, p);
            let left = &id - rho * &step * y.transpose();
            h_inv = &left * h_inv * left.transpose() + rho * &step * step.transpose();
            h_is_identity = false;
        }
        x = x_new;
        fx = f_new;
        gx = g_new;
        history.push(IterationRecord {
            theta: x.clone(),
            nll: fx,
            grad_norm: gx.amax(),
            step_len,
        });
        converged = gx.amax() <= opts.grad_tol;
        if step_len < opts.min_step {
            // x-convergence
            converged = true;
            break;
        }
    }

    OptimizerReport {
        theta_hat: x,
        iterations,
        final_grad_norm: gx.amax(),
        line_search_failures,
        converged,
        history,
    }
}

/// Maximum-likelihood estimation of the model parameters from one data set.
///
/// Runs the selected sensitivity engine at every trial point to obtain the
/// negative log-likelihood and its analytic gradient, and minimizes with
/// [`minimize`]. A filter failure during a trial step shrinks the step; the
/// report is always returned, flagged via `converged`.
pub fn estimate(
    model: &ParametrizedModel,
    data: &Trajectory,
    theta0: &DVector<f64>,
    opts: &EstimateOptions,
) -> OptimizerReport {
    let objective = |theta: &DVector<f64>| -> Option<(f64, DVector<f64>)> {
        match opts.engine {
            Engine::DiffSvdKf => {
                let inst = model.evaluate(theta).ok()?;
                let fac = init_factors(&inst, model.factor_supply()).ok()?;
                let trace = diff_svd_kf_run(&inst, &fac, data).ok()?;
                let value = nll_diff_svd(&trace).ok()?;
                let grad = grad_nll_svd(&trace).ok()?;
                Some((value, grad))
            }
            Engine::DiffKf => {
                let inst = model.evaluate(theta).ok()?;
                let trace = diff_kf_run(&inst, data).ok()?;
                let value = nll_diff_conventional(&trace).ok()?;
                let grad = grad_nll_conventional(&trace).ok()?;
                Some((value, grad))
            }
        }
    };
    minimize(objective, theta0, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quadratic_bowl_converges() {
        let opts = EstimateOptions::default();
        let report = minimize(
            |t| {
                let d = t[0] - 3.0;
                Some((d * d, DVector::from_vec(vec![2.0 * d])))
            },
            &DVector::from_vec(vec![-7.0]),
            &opts,
        );
        assert!(report.converged);
        assert!(report.iterations <= 30, "took {} iterations", report.iterations);
        assert_abs_diff_eq!(report.theta_hat[0], 3.0, epsilon = 1e-6);
    }

    #[test]
    fn two_dimensional_quadratic() {
        let opts = EstimateOptions::default();
        let report = minimize(
            |t| {
                let (a, b) = (t[0] - 1.0, t[1] + 2.0);
                Some((
                    a * a + 10.0 * b * b,
                    DVector::from_vec(vec![2.0 * a, 20.0 * b]),
                ))
            },
            &DVector::from_vec(vec![5.0, 5.0]),
            &opts,
        );
        assert!(report.converged);
        assert_abs_diff_eq!(report.theta_hat[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(report.theta_hat[1], -2.0, epsilon = 1e-5);
    }

    #[test]
    fn history_is_non_increasing() {
        let opts = EstimateOptions::default();
        let report = minimize(
            |t| {
                let d = t[0] * t[0] + (t[0] - 1.0).powi(4);
                Some((
                    d,
                    DVector::from_vec(vec![2.0 * t[0] + 4.0 * (t[0] - 1.0).powi(3)]),
                ))
            },
            &DVector::from_vec(vec![4.0]),
            &opts,
        );
        for w in report.history.windows(2) {
            assert!(w[1].nll <= w[0].nll + 1e-12);
        }
    }

    #[test]
    fn evaluation_failures_shrink_the_step() {
        // objective only defined on |t| < 5; start at 4 so full steps fail
        let opts = EstimateOptions::default();
        let report = minimize(
            |t| {
                if t[0].abs() >= 5.0 {
                    None
                } else {
                    let d = t[0] - 4.9;
                    Some((d * d, DVector::from_vec(vec![2.0 * d])))
                }
            },
            &DVector::from_vec(vec![-4.0]),
            &opts,
        );
        assert!(report.converged);
        assert_abs_diff_eq!(report.theta_hat[0], 4.9, epsilon = 1e-6);
    }

    #[test]
    fn failure_at_start_is_flagged() {
        let opts = EstimateOptions::default();
        let report = minimize(|_| None, &DVector::from_vec(vec![1.0]), &opts);
        assert!(!report.converged);
        assert_eq!(report.iterations, 0);
    }

    #[test]
    fn report_csv_has_header_and_rows() {
        let opts = EstimateOptions::default();
        let report = minimize(
            |t| {
                let d = t[0] - 3.0;
                Some((d * d, DVector::from_vec(vec![2.0 * d])))
            },
            &DVector::from_vec(vec![0.0]),
            &opts,
        );
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "iter,theta_0,nll,grad_norm,step_len");
        assert_eq!(text.lines().count(), report.history.len() + 1);
    }
}
