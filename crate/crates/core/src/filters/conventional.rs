//! Conventional covariance filter and its sensitivity extension.
//!
//! The covariance recursion subtracts a Gram matrix at every step, which is
//! exactly what loses positive semi-definiteness under roundoff on
//! ill-conditioned problems; these engines are the reference the factored
//! engines are measured against.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filters::{validate_data, DiffKfStep, DiffKfTrace, KfStep, KfTrace};
use crate::linalg::{all_finite_mat, all_finite_vec};
use crate::model::{ModelInstance, Trajectory};

/// Runs the conventional filter.
///
/// Per step: innovation `e = z - H x`, innovation covariance
/// `Re = R + H P H^T`, predictor gain `Kp = F P H^T Re^{-1}`, state
/// prediction `x <- F x + B u + Kp e`, covariance recursion
/// `P <- F P F^T + G Omega G^T - Kp Re Kp^T`, started from the initial mean
/// and covariance. The filtered estimate `x + P H^T Re^{-1} e` is recorded
/// alongside.
pub fn kf_run(instance: &ModelInstance, data: &Trajectory) -> Result<KfTrace> {
    validate_data(instance, data)?;
    let mats = &instance.mats;
    let g_omega_gt = &mats.g * &mats.omega * mats.g.transpose();
    let mut x = mats.x0_mean.clone();
    let mut p = mats.pi0.clone();
    let mut steps = Vec::with_capacity(data.steps());
    for k in 1..=data.steps() {
        let z = &data.measurements[k - 1];
        let u = &data.controls[k - 1];
        let e = z - &mats.h * &x;
        let re = &mats.r + &mats.h * &p * mats.h.transpose();
        let re_inv = Cholesky::new(re.clone())
            .ok_or(Error::SingularInnovationCovariance { step: k })?
            .inverse();
        let k_filt = &p * mats.h.transpose() * &re_inv;
        let x_filt = &x + &k_filt * &e;
        let k_pred = &mats.f * &k_filt;
        let x_next = &mats.f * &x + &mats.b * u + &k_pred * &e;
        let p_next = &mats.f * &p * mats.f.transpose() + &g_omega_gt
            - &k_pred * &re * k_pred.transpose();
        if !(all_finite_vec(&e)
            && all_finite_vec(&x_filt)
            && all_finite_vec(&x_next)
            && all_finite_mat(&p_next))
        {
            return Err(Error::NonFiniteState { step: k });
        }
        steps.push(KfStep {
            x_pred: x,
            x_filt,
            p_pred: p,
            innovation: e,
            innovation_cov: re,
            gain: k_pred,
        });
        x = x_next;
        p = p_next;
    }
    Ok(KfTrace { steps })
}

/// Runs the conventional filter together with its sensitivity recursions.
///
/// Measurements and controls are realizations independent of the parameters,
/// so their derivatives are zero; the derivative tracks start from
/// `dx = 0` and `dP = dPi0` and follow the product-rule differentials of the
/// filter equations, using `d(Re^{-1}) = -Re^{-1} dRe Re^{-1}`.
pub fn diff_kf_run(instance: &ModelInstance, data: &Trajectory) -> Result<DiffKfTrace> {
    validate_data(instance, data)?;
    let mats = &instance.mats;
    let parts = &instance.partials;
    let np = instance.dims.p;
    let g_omega_gt = &mats.g * &mats.omega * mats.g.transpose();
    let d_g_omega_gt: Vec<DMatrix<f64>> = parts
        .iter()
        .map(|d| {
            &d.g * &mats.omega * mats.g.transpose()
                + &mats.g * &d.omega * mats.g.transpose()
                + &mats.g * &mats.omega * d.g.transpose()
        })
        .collect();

    let mut x = mats.x0_mean.clone();
    let mut p = mats.pi0.clone();
    let mut dx: Vec<DVector<f64>> = (0..np).map(|_| DVector::zeros(instance.dims.n)).collect();
    let mut dp: Vec<DMatrix<f64>> = parts.iter().map(|d| d.pi0.clone()).collect();

    let mut steps = Vec::with_capacity(data.steps());
    for k in 1..=data.steps() {
        let z = &data.measurements[k - 1];
        let u = &data.controls[k - 1];
        let e = z - &mats.h * &x;
        let re = &mats.r + &mats.h * &p * mats.h.transpose();
        let re_inv = Cholesky::new(re.clone())
            .ok_or(Error::SingularInnovationCovariance { step: k })?
            .inverse();
        let ph_t = &p * mats.h.transpose();
        let k_filt = &ph_t * &re_inv;
        let k_pred = &mats.f * &k_filt;
        let x_filt = &x + &k_filt * &e;
        let x_next = &mats.f * &x + &mats.b * u + &k_pred * &e;
        let p_next = &mats.f * &p * mats.f.transpose() + &g_omega_gt
            - &k_pred * &re * k_pred.transpose();

        let mut de_all = Vec::with_capacity(np);
        let mut dre_all = Vec::with_capacity(np);
        let mut dkp_all = Vec::with_capacity(np);
        let mut dxf_all = Vec::with_capacity(np);
        let mut dxn_all = Vec::with_capacity(np);
        let mut dpn_all = Vec::with_capacity(np);
        for i in 0..np {
            let d = &parts[i];
            let de = -(&d.h * &x + &mats.h * &dx[i]);
            let dre = &d.r
                + &d.h * &p * mats.h.transpose()
                + &mats.h * &dp[i] * mats.h.transpose()
                + &mats.h * &p * d.h.transpose();
            let dk_filt = &dp[i] * mats.h.transpose() * &re_inv
                + &p * d.h.transpose() * &re_inv
                - &ph_t * &re_inv * &dre * &re_inv;
            let dk_pred = &d.f * &k_filt + &mats.f * &dk_filt;
            let dxf = &dx[i] + &dk_filt * &e + &k_filt * &de;
            let dxn = &d.f * &x + &mats.f * &dx[i] + &d.b * u + &dk_pred * &e + &k_pred * &de;
            let dpn = &d.f * &p * mats.f.transpose()
                + &mats.f * &dp[i] * mats.f.transpose()
                + &mats.f * &p * d.f.transpose()
                + &d_g_omega_gt[i]
                - &dk_pred * &re * k_pred.transpose()
                - &k_pred * &dre * k_pred.transpose()
                - &k_pred * &re * dk_pred.transpose();
            de_all.push(de);
            dre_all.push(dre);
            dkp_all.push(dk_pred);
            dxf_all.push(dxf);
            dxn_all.push(dxn);
            dpn_all.push(dpn);
        }

        let finite = all_finite_vec(&e)
            && all_finite_vec(&x_next)
            && all_finite_mat(&p_next)
            && dxn_all.iter().all(all_finite_vec)
            && dpn_all.iter().all(all_finite_mat);
        if !finite {
            return Err(Error::NonFiniteState { step: k });
        }

        steps.push(DiffKfStep {
            base: KfStep {
                x_pred: x,
                x_filt,
                p_pred: p,
                innovation: e,
                innovation_cov: re,
                gain: k_pred,
            },
            dx_pred: dx,
            dx_filt: dxf_all,
            dp_pred: dp,
            d_innovation: de_all,
            d_innovation_cov: dre_all,
            d_gain: dkp_all,
        });
        x = x_next;
        p = p_next;
        dx = dxn_all;
        dp = dpn_all;
    }
    Ok(DiffKfTrace { steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, ParametrizedModel, SystemMatrices, SystemPartials, Trajectory};
    use approx::assert_abs_diff_eq;

    /// Scalar model with F = H = 1, Pi0 = 1, Omega = 0 and R = theta.
    fn scalar_model() -> ParametrizedModel {
        let dims = ModelDims { n: 1, m: 1, d: 0, q: 1, p: 1 };
        ParametrizedModel::new(
            dims,
            |theta: &DVector<f64>| SystemMatrices {
                f: DMatrix::identity(1, 1),
                b: DMatrix::zeros(1, 0),
                g: DMatrix::identity(1, 1),
                h: DMatrix::identity(1, 1),
                omega: DMatrix::zeros(1, 1),
                r: DMatrix::from_element(1, 1, theta[0]),
                pi0: DMatrix::identity(1, 1),
                x0_mean: DVector::zeros(1),
            },
            |_| {
                vec![SystemPartials {
                    f: DMatrix::zeros(1, 1),
                    b: DMatrix::zeros(1, 0),
                    g: DMatrix::zeros(1, 1),
                    h: DMatrix::zeros(1, 1),
                    omega: DMatrix::zeros(1, 1),
                    r: DMatrix::identity(1, 1),
                    pi0: DMatrix::zeros(1, 1),
                }]
            },
        )
    }

    fn one_step_data(z: f64) -> Trajectory {
        Trajectory {
            states: vec![DVector::zeros(1); 2],
            measurements: vec![DVector::from_element(1, z)],
            controls: vec![DVector::zeros(0)],
            seed: 0,
        }
    }

    #[test]
    fn scalar_hand_values() {
        // R = 1, Pi0 = 1: Re = 2, Kp = 0.5, P_next = 1 - 0.25*2 = 0.5
        let model = scalar_model();
        let inst = model.evaluate(&DVector::from_vec(vec![1.0])).unwrap();
        let data = Trajectory {
            states: vec![DVector::zeros(1); 3],
            measurements: vec![DVector::from_element(1, 0.3), DVector::from_element(1, -0.1)],
            controls: vec![DVector::zeros(0); 2],
            seed: 0,
        };
        let trace = kf_run(&inst, &data).unwrap();
        assert_abs_diff_eq!(trace.steps[0].innovation_cov[(0, 0)], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(trace.steps[0].gain[(0, 0)], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(trace.steps[1].p_pred[(0, 0)], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn zero_observation_matrix_runs_open_loop() {
        let dims = ModelDims { n: 1, m: 1, d: 0, q: 1, p: 1 };
        let model = ParametrizedModel::new(
            dims,
            |_| SystemMatrices {
                f: DMatrix::from_element(1, 1, 2.0),
                b: DMatrix::zeros(1, 0),
                g: DMatrix::identity(1, 1),
                h: DMatrix::zeros(1, 1),
                omega: DMatrix::zeros(1, 1),
                r: DMatrix::identity(1, 1),
                pi0: DMatrix::identity(1, 1),
                x0_mean: DVector::from_element(1, 1.0),
            },
            |_| {
                vec![SystemPartials {
                    f: DMatrix::zeros(1, 1),
                    b: DMatrix::zeros(1, 0),
                    g: DMatrix::zeros(1, 1),
                    h: DMatrix::zeros(1, 1),
                    omega: DMatrix::zeros(1, 1),
                    r: DMatrix::zeros(1, 1),
                    pi0: DMatrix::zeros(1, 1),
                }]
            },
        );
        let inst = model.evaluate(&DVector::from_vec(vec![0.0])).unwrap();
        let data = Trajectory {
            states: vec![DVector::zeros(1); 4],
            measurements: vec![DVector::from_element(1, 7.0); 3],
            controls: vec![DVector::zeros(0); 3],
            seed: 0,
        };
        let trace = kf_run(&inst, &data).unwrap();
        // e_k = z_k, state doubles open loop from x0 = 1
        for (k, step) in trace.steps.iter().enumerate() {
            assert_abs_diff_eq!(step.innovation[0], 7.0, epsilon = 1e-14);
            assert_abs_diff_eq!(step.x_pred[0], 2f64.powi(k as i32), epsilon = 1e-12);
            assert!(step.gain.amax() == 0.0);
        }
    }

    #[test]
    fn scalar_derivative_hand_values() {
        // R = theta at theta = 1: dRe = 1, dKp = -P H / Re^2 = -0.25
        let model = scalar_model();
        let inst = model.evaluate(&DVector::from_vec(vec![1.0])).unwrap();
        let trace = diff_kf_run(&inst, &one_step_data(0.3)).unwrap();
        let s = &trace.steps[0];
        assert_abs_diff_eq!(s.d_innovation_cov[0][(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.d_gain[0][(0, 0)], -0.25, epsilon = 1e-14);
        // dP_next = -dKp Re Kp - Kp dRe Kp - Kp Re dKp
        //         = 0.25*2*0.5 - 0.5*1*0.5 + 0.25*2*0.5 = 0.25
        let p2 = diff_kf_run(
            &inst,
            &Trajectory {
                states: vec![DVector::zeros(1); 3],
                measurements: vec![DVector::from_element(1, 0.3); 2],
                controls: vec![DVector::zeros(0); 2],
                seed: 0,
            },
        )
        .unwrap();
        assert_abs_diff_eq!(p2.steps[1].dp_pred[0][(0, 0)], 0.25, epsilon = 1e-14);
    }

    #[test]
    fn theta_independent_model_has_zero_sensitivities() {
        let dims = ModelDims { n: 2, m: 1, d: 0, q: 2, p: 1 };
        let model = ParametrizedModel::new(
            dims,
            |_| SystemMatrices {
                f: DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
                b: DMatrix::zeros(2, 0),
                g: DMatrix::identity(2, 2),
                h: DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
                omega: DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.1])),
                r: DMatrix::from_element(1, 1, 0.5),
                pi0: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])),
                x0_mean: DVector::zeros(2),
            },
            |_| {
                vec![SystemPartials {
                    f: DMatrix::zeros(2, 2),
                    b: DMatrix::zeros(2, 0),
                    g: DMatrix::zeros(2, 2),
                    h: DMatrix::zeros(2, 2).resize(1, 2, 0.0),
                    omega: DMatrix::zeros(2, 2),
                    r: DMatrix::zeros(1, 1),
                    pi0: DMatrix::zeros(2, 2),
                }]
            },
        );
        let inst = model.evaluate(&DVector::from_vec(vec![1.0])).unwrap();
        let data = Trajectory {
            states: vec![DVector::zeros(2); 6],
            measurements: (0..5).map(|k| DVector::from_element(1, 0.1 * k as f64)).collect(),
            controls: vec![DVector::zeros(0); 5],
            seed: 0,
        };
        let trace = diff_kf_run(&inst, &data).unwrap();
        for step in &trace.steps {
            assert!(step.dx_pred[0].amax() == 0.0);
            assert!(step.dp_pred[0].amax() == 0.0);
            assert!(step.d_innovation[0].amax() == 0.0);
        }
    }

    #[test]
    fn symmetry_of_riccati_sensitivity() {
        let model = crate::model::satellite_model(0.1, crate::model::SATELLITE_DEFAULT_Q1);
        let theta = DVector::from_vec(vec![5.0]);
        let inst = model.evaluate(&theta).unwrap();
        let data = crate::model::simulate(&inst, 40, 3, None).unwrap();
        let trace = diff_kf_run(&inst, &data).unwrap();
        for step in &trace.steps {
            let dp = &step.dp_pred[0];
            let res = crate::linalg::max_abs_diff(dp, &dp.transpose());
            assert!(res <= 1e-9, "asymmetry {res}");
        }
    }
}
