//! Filter engines.
//!
//! Four engines run over the same model instance and trajectory:
//!
//! * [`kf_run`] — the conventional covariance filter;
//! * [`diff_kf_run`] — the conventional filter plus its sensitivity
//!   recursions (state and Riccati derivatives per parameter);
//! * [`svd_kf_run`] — the factored filter: covariances are carried as
//!   `{Q, D^{1/2}}` pairs updated through pre-array factorizations; see also
//!   the standalone [`svd_measurement_update`] and [`svd_time_update`];
//! * [`diff_svd_kf_run`] — the factored filter plus factor-derivative
//!   recursions, with every pre-array derivative propagated through the
//!   differentiated factorization.
//!
//! All engines stop at the first NaN/Inf or factorization error: a failed
//! run is reported as an error, never silently clamped.

mod conventional;
mod svd;

pub use conventional::{diff_kf_run, kf_run};
pub use svd::{
    diff_svd_kf_run, svd_kf_run, svd_measurement_update, svd_time_update, MeasurementUpdate,
    TimeUpdate,
};

pub use crate::svd_diff::SvdFactors;

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ModelInstance, Trajectory};

/// One step of the conventional filter.
#[derive(Debug, Clone)]
pub struct KfStep {
    /// Predicted estimate entering the step.
    pub x_pred: DVector<f64>,
    /// Filtered estimate after assimilating the measurement.
    pub x_filt: DVector<f64>,
    /// Predicted error covariance entering the step.
    pub p_pred: DMatrix<f64>,
    pub innovation: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
    /// Predictor gain.
    pub gain: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct KfTrace {
    pub steps: Vec<KfStep>,
}

/// One step of the factored filter.
#[derive(Debug, Clone)]
pub struct SvdKfStep {
    pub x_pred: DVector<f64>,
    pub x_filt: DVector<f64>,
    /// Factors of the predicted error covariance entering the step.
    pub p_pred: SvdFactors,
    /// Factors of the innovation covariance.
    pub re: SvdFactors,
    /// Gain in the rotated innovation basis.
    pub gain_bar: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    /// Innovation rotated into the basis of `re.q`.
    pub rotated_innovation: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SvdKfTrace {
    pub steps: Vec<SvdKfStep>,
}

impl SvdKfTrace {
    /// Per-step CSV: state estimates, diagonal of the predicted-covariance
    /// `D` factor, and the innovation log-determinant term.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let Some(first) = self.steps.first() else {
            return Ok(());
        };
        let n = first.x_pred.len();
        let mut header = String::from("step");
        for i in 0..n {
            header.push_str(&format!(",x_pred_{i}"));
        }
        for i in 0..n {
            header.push_str(&format!(",x_filt_{i}"));
        }
        for i in 0..n {
            header.push_str(&format!(",d_{i}"));
        }
        header.push_str(",logdet_re");
        writeln!(out, "{header}")?;
        for (k, step) in self.steps.iter().enumerate() {
            let mut line = format!("{}", k + 1);
            for v in step.x_pred.iter() {
                line.push_str(&format!(",{v:.12e}"));
            }
            for v in step.x_filt.iter() {
                line.push_str(&format!(",{v:.12e}"));
            }
            for v in step.p_pred.d().iter() {
                line.push_str(&format!(",{v:.12e}"));
            }
            let logdet: f64 = step.re.d().iter().map(|d| d.ln()).sum();
            line.push_str(&format!(",{logdet:.12e}"));
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// One step of the conventional filter with its `p` sensitivity tracks.
#[derive(Debug, Clone)]
pub struct DiffKfStep {
    pub base: KfStep,
    pub dx_pred: Vec<DVector<f64>>,
    pub dx_filt: Vec<DVector<f64>>,
    pub dp_pred: Vec<DMatrix<f64>>,
    pub d_innovation: Vec<DVector<f64>>,
    pub d_innovation_cov: Vec<DMatrix<f64>>,
    pub d_gain: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct DiffKfTrace {
    pub steps: Vec<DiffKfStep>,
}

/// One step of the factored filter with its `p` factor-derivative tracks.
#[derive(Debug, Clone)]
pub struct DiffSvdKfStep {
    pub base: SvdKfStep,
    pub dx_pred: Vec<DVector<f64>>,
    pub dx_filt: Vec<DVector<f64>>,
    /// Derivatives of the predicted-covariance factors entering the step.
    pub dq_pred: Vec<DMatrix<f64>>,
    pub dd_sqrt_pred: Vec<DVector<f64>>,
    /// Derivatives of the innovation-covariance factors.
    pub dq_re: Vec<DMatrix<f64>>,
    pub dd_sqrt_re: Vec<DVector<f64>>,
    pub d_gain_bar: Vec<DMatrix<f64>>,
    pub d_rotated_innovation: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct DiffSvdKfTrace {
    pub steps: Vec<DiffSvdKfStep>,
}

pub(crate) fn validate_data(instance: &ModelInstance, data: &Trajectory) -> Result<()> {
    if data.steps() == 0 {
        return Err(Error::ShapeMismatch("trajectory has no measurements".into()));
    }
    if data.measurements.iter().any(|z| z.len() != instance.dims.m) {
        return Err(Error::ShapeMismatch(format!(
            "measurements must have length {}",
            instance.dims.m
        )));
    }
    if data.controls.len() != data.steps()
        || data.controls.iter().any(|u| u.len() != instance.dims.d)
    {
        return Err(Error::ShapeMismatch(format!(
            "need {} controls of length {}",
            data.steps(),
            instance.dims.d
        )));
    }
    Ok(())
}
