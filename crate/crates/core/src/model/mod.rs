//! Parametrized linear-Gaussian state-space models.
//!
//! A model is a set of generators mapping a parameter vector `theta` to the
//! system matrices of
//!
//! ```text
//! x_k = F x_{k-1} + B u_{k-1} + G w_{k-1},   w_k ~ N(0, Omega)
//! z_k = H x_k + v_k,                         v_k ~ N(0, R)
//! x_0 ~ N(x0_mean, Pi0)
//! ```
//!
//! together with generators for all `p` partial derivatives of those
//! matrices. Derivatives are analytic by contract; [`fd_matrix_oracle`] is a
//! finite-difference audit of the supplied partials, not a substitute for
//! them. Generators must be pure: evaluation and simulation are reentrant
//! and independent simulations can run in parallel with per-run seeds.

mod config;
mod factors;
mod satellite;
mod simulate;

pub use config::{parse_model_config, load_model_config, ModelConfig};
pub use factors::{
    init_factors, AnalyticFactors, FactorSpec, FactorSupply, FactorWithDerivs, InitFactors,
};
pub use satellite::{satellite_model, SATELLITE_DEFAULT_Q1};
pub use simulate::{simulate, Trajectory};

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Dimensions of a state-space model.
///
/// `n` states, `m` measurements, `d` control inputs, `q` process-noise
/// channels, `p` unknown parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub q: usize,
    pub p: usize,
}

/// One evaluation of the system-matrix generators.
#[derive(Debug, Clone)]
pub struct SystemMatrices {
    pub f: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub pi0: DMatrix<f64>,
    pub x0_mean: DVector<f64>,
}

/// Partial derivatives of the system matrices with respect to one parameter.
///
/// The initial-state mean is parameter independent by contract, so it has no
/// derivative here.
#[derive(Debug, Clone)]
pub struct SystemPartials {
    pub f: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub pi0: DMatrix<f64>,
}

type SystemFn = dyn Fn(&DVector<f64>) -> SystemMatrices + Send + Sync;
type PartialsFn = dyn Fn(&DVector<f64>) -> Vec<SystemPartials> + Send + Sync;

/// A state-space model parametrized by `theta`, with user-supplied analytic
/// generators for the system matrices and their partial derivatives.
#[derive(Clone)]
pub struct ParametrizedModel {
    dims: ModelDims,
    system: Arc<SystemFn>,
    partials: Arc<PartialsFn>,
    factor_supply: FactorSupply,
}

impl ParametrizedModel {
    pub fn new(
        dims: ModelDims,
        system: impl Fn(&DVector<f64>) -> SystemMatrices + Send + Sync + 'static,
        partials: impl Fn(&DVector<f64>) -> Vec<SystemPartials> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dims,
            system: Arc::new(system),
            partials: Arc::new(partials),
            factor_supply: FactorSupply::default(),
        }
    }

    /// Installs analytic covariance factor generators used by
    /// [`init_factors`] instead of the computed factorization path.
    pub fn with_factor_supply(mut self, supply: FactorSupply) -> Self {
        self.factor_supply = supply;
        self
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn factor_supply(&self) -> &FactorSupply {
        &self.factor_supply
    }

    /// Raw generator output at `theta`, without validation.
    pub fn system(&self, theta: &DVector<f64>) -> SystemMatrices {
        (self.system)(theta)
    }

    /// Raw partial-derivative generator output at `theta`, without validation.
    pub fn partials(&self, theta: &DVector<f64>) -> Vec<SystemPartials> {
        (self.partials)(theta)
    }

    /// Materializes all system matrices and their `p` partials at `theta`,
    /// shape-checked, with the measurement noise verified positive definite.
    pub fn evaluate(&self, theta: &DVector<f64>) -> Result<ModelInstance> {
        let dims = self.dims;
        if theta.len() != dims.p {
            return Err(Error::ShapeMismatch(format!(
                "theta has length {}, model has {} parameters",
                theta.len(),
                dims.p
            )));
        }
        let mats = self.system(theta);
        check_system_shapes(&dims, &mats)?;
        let partials = self.partials(theta);
        if partials.len() != dims.p {
            return Err(Error::ShapeMismatch(format!(
                "{} partial-derivative sets supplied, expected {}",
                partials.len(),
                dims.p
            )));
        }
        for part in &partials {
            check_partial_shapes(&dims, part)?;
        }
        if Cholesky::new(mats.r.clone()).is_none() {
            return Err(Error::NotPd("measurement noise covariance"));
        }
        Ok(ModelInstance {
            dims,
            theta: theta.clone(),
            mats,
            partials,
        })
    }
}

fn check_system_shapes(dims: &ModelDims, m: &SystemMatrices) -> Result<()> {
    let expect = [
        ("F", m.f.shape(), (dims.n, dims.n)),
        ("B", m.b.shape(), (dims.n, dims.d)),
        ("G", m.g.shape(), (dims.n, dims.q)),
        ("H", m.h.shape(), (dims.m, dims.n)),
        ("Omega", m.omega.shape(), (dims.q, dims.q)),
        ("R", m.r.shape(), (dims.m, dims.m)),
        ("Pi0", m.pi0.shape(), (dims.n, dims.n)),
    ];
    for (name, got, want) in expect {
        if got != want {
            return Err(Error::ShapeMismatch(format!(
                "{name} is {}x{}, expected {}x{}",
                got.0, got.1, want.0, want.1
            )));
        }
    }
    if m.x0_mean.len() != dims.n {
        return Err(Error::ShapeMismatch(format!(
            "x0_mean has length {}, expected {}",
            m.x0_mean.len(),
            dims.n
        )));
    }
    Ok(())
}

fn check_partial_shapes(dims: &ModelDims, m: &SystemPartials) -> Result<()> {
    let expect = [
        ("dF", m.f.shape(), (dims.n, dims.n)),
        ("dB", m.b.shape(), (dims.n, dims.d)),
        ("dG", m.g.shape(), (dims.n, dims.q)),
        ("dH", m.h.shape(), (dims.m, dims.n)),
        ("dOmega", m.omega.shape(), (dims.q, dims.q)),
        ("dR", m.r.shape(), (dims.m, dims.m)),
        ("dPi0", m.pi0.shape(), (dims.n, dims.n)),
    ];
    for (name, got, want) in expect {
        if got != want {
            return Err(Error::ShapeMismatch(format!(
                "{name} is {}x{}, expected {}x{}",
                got.0, got.1, want.0, want.1
            )));
        }
    }
    Ok(())
}

/// A model evaluated at a concrete parameter value: all matrices and all `p`
/// partial-derivative sets as numbers.
#[derive(Debug, Clone)]
pub struct ModelInstance {
    pub dims: ModelDims,
    pub theta: DVector<f64>,
    pub mats: SystemMatrices,
    pub partials: Vec<SystemPartials>,
}

/// Central-difference partials of all system matrices, one set per
/// parameter. Audit oracle for the analytic generators.
pub fn fd_matrix_oracle(
    model: &ParametrizedModel,
    theta: &DVector<f64>,
    h: f64,
) -> Vec<SystemPartials> {
    let p = model.dims().p;
    let mut out = Vec::with_capacity(p);
    for i in 0..p {
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[i] += h;
        tm[i] -= h;
        let plus = model.system(&tp);
        let minus = model.system(&tm);
        // realized step, so the quantization of theta_i +- h cancels
        let scale = 1.0 / (tp[i] - tm[i]);
        out.push(SystemPartials {
            f: (&plus.f - &minus.f) * scale,
            b: (&plus.b - &minus.b) * scale,
            g: (&plus.g - &minus.g) * scale,
            h: (&plus.h - &minus.h) * scale,
            omega: (&plus.omega - &minus.omega) * scale,
            r: (&plus.r - &minus.r) * scale,
            pi0: (&plus.pi0 - &minus.pi0) * scale,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use approx::assert_abs_diff_eq;

    #[test]
    fn satellite_evaluate_r_and_partial() {
        let model = satellite_model(0.1, SATELLITE_DEFAULT_Q1);
        let theta = DVector::from_vec(vec![5.0]);
        let inst = model.evaluate(&theta).unwrap();
        assert_abs_diff_eq!(inst.mats.r[(0, 0)], 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(inst.mats.r[(1, 1)], 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(inst.partials[0].r[(0, 0)], 0.1, epsilon = 1e-14);
        assert_abs_diff_eq!(inst.partials[0].r[(1, 1)], 0.1, epsilon = 1e-14);
        assert_abs_diff_eq!(inst.mats.h[(1, 3)], 1.1, epsilon = 1e-14);
        assert_abs_diff_eq!(inst.partials[0].pi0[(2, 2)], 10.0, epsilon = 1e-14);
    }

    #[test]
    fn theta_free_matrices_have_zero_partials() {
        let model = satellite_model(0.1, SATELLITE_DEFAULT_Q1);
        let inst = model.evaluate(&DVector::from_vec(vec![5.0])).unwrap();
        assert!(inst.partials[0].f.amax() == 0.0);
        assert!(inst.partials[0].h.amax() == 0.0);
        assert!(inst.partials[0].omega.amax() == 0.0);
    }

    #[test]
    fn analytic_partials_match_fd_oracle() {
        let model = satellite_model(0.1, SATELLITE_DEFAULT_Q1);
        let theta = DVector::from_vec(vec![5.0]);
        let inst = model.evaluate(&theta).unwrap();
        let fd = fd_matrix_oracle(&model, &theta, 1e-6);
        assert!(max_abs_diff(&fd[0].r, &inst.partials[0].r) < 1e-6);
        assert!(max_abs_diff(&fd[0].pi0, &inst.partials[0].pi0) < 1e-6);
        assert!(max_abs_diff(&fd[0].f, &inst.partials[0].f) < 1e-6);
    }

    #[test]
    fn evaluate_rejects_non_pd_measurement_noise() {
        let model = satellite_model(0.1, SATELLITE_DEFAULT_Q1);
        // R = theta^2 delta^2 I vanishes at theta = 0
        assert!(matches!(
            model.evaluate(&DVector::from_vec(vec![0.0])),
            Err(Error::NotPd(_))
        ));
    }

    #[test]
    fn evaluate_rejects_wrong_theta_length() {
        let model = satellite_model(0.1, SATELLITE_DEFAULT_Q1);
        assert!(matches!(
            model.evaluate(&DVector::from_vec(vec![5.0, 1.0])),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
