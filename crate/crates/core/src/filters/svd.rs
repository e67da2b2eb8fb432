//! Factored filter engines.
//!
//! Covariances are carried as `{Q, D^{1/2}}` pairs. Each update stacks the
//! current factors into a tall pre-array whose Gram product equals the
//! covariance being updated, factors it, and reads the new `{Q, D^{1/2}}`
//! off the post-arrays. The diagonal factors stay nonnegative by
//! construction, so the recursion never manufactures an indefinite
//! covariance the way the conventional subtraction can.
//!
//! The sensitivity engine additionally assembles the derivative of every
//! pre-array by the product rule and pushes it through the differentiated
//! factorization, reading `dQ` and `dD^{1/2}` off the post-array
//! derivatives on the same branch.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, PreArrayKind, Result};
use crate::filters::{
    validate_data, DiffSvdKfStep, DiffSvdKfTrace, SvdKfStep, SvdKfTrace,
};
use crate::linalg::{all_finite_mat, all_finite_vec, scale_columns, scale_rows, vstack};
use crate::model::{InitFactors, ModelInstance, Trajectory};
use crate::svd_diff::{differentiated_svd_with, svd_factorize, SvdFactors, SvdTriple};

/// Result of one factored measurement update.
#[derive(Debug, Clone)]
pub struct MeasurementUpdate {
    pub x_filt: DVector<f64>,
    pub p_filt: SvdFactors,
    pub re: SvdFactors,
    pub gain_bar: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub rotated_innovation: DVector<f64>,
}

/// Result of one factored time update.
#[derive(Debug, Clone)]
pub struct TimeUpdate {
    pub x_pred: DVector<f64>,
    pub p_pred: SvdFactors,
}

/// `[D_R^{1/2} Q_R^T ; D_P^{1/2} Q_P^T H^T]`, the (m+n) x m pre-array whose
/// Gram product is `R + H P H^T`.
fn innovation_pre_array(r: &SvdFactors, p_pred: &SvdFactors, h: &DMatrix<f64>) -> DMatrix<f64> {
    let top = scale_rows(&r.d_sqrt, &r.q.transpose());
    let bottom = scale_rows(&p_pred.d_sqrt, &(p_pred.q.transpose() * h.transpose()));
    vstack(&[&top, &bottom])
}

/// `[D_P^{1/2} Q_P^T (I - K H)^T ; D_R^{1/2} Q_R^T K^T]`, the (n+m) x n
/// pre-array whose Gram product is the posterior covariance in Joseph form.
fn posterior_pre_array(
    p_pred: &SvdFactors,
    r: &SvdFactors,
    gain: &DMatrix<f64>,
    h: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = p_pred.dim();
    let ikh_t = DMatrix::identity(n, n) - (gain * h).transpose();
    let top = scale_rows(&p_pred.d_sqrt, &(p_pred.q.transpose() * ikh_t));
    let bottom = scale_rows(&r.d_sqrt, &(r.q.transpose() * gain.transpose()));
    vstack(&[&top, &bottom])
}

/// `[D_P^{1/2} Q_P^T F^T ; D_Omega^{1/2} Q_Omega^T G^T]`, the (n+q) x n
/// pre-array whose Gram product is `F P F^T + G Omega G^T`.
fn time_update_pre_array(
    p_filt: &SvdFactors,
    omega: &SvdFactors,
    f: &DMatrix<f64>,
    g: &DMatrix<f64>,
) -> DMatrix<f64> {
    let top = scale_rows(&p_filt.d_sqrt, &(p_filt.q.transpose() * f.transpose()));
    let bottom = scale_rows(&omega.d_sqrt, &(omega.q.transpose() * g.transpose()));
    vstack(&[&top, &bottom])
}

/// `Kbar = (Q_P D_P Q_P^T) H^T Q_Re` and `K = Kbar D_Re^{-1} Q_Re^T`,
/// evaluated factor by factor without materializing `P`.
fn gains(
    p_pred: &SvdFactors,
    h: &DMatrix<f64>,
    re: &SvdFactors,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let ht_qre = h.transpose() * &re.q;
    let inner = scale_rows(&p_pred.d(), &(p_pred.q.transpose() * &ht_qre));
    let gain_bar = &p_pred.q * inner;
    let d = re.d();
    if d.iter().any(|&x| x == 0.0) {
        return Err(Error::ZeroSingularValue);
    }
    let inv_d = d.map(|x| 1.0 / x);
    let gain = scale_columns(&gain_bar, &inv_d) * re.q.transpose();
    Ok((gain_bar, gain))
}

fn read_factors(triple: &SvdTriple) -> SvdFactors {
    SvdFactors {
        q: triple.v.clone(),
        d_sqrt: triple.s.clone(),
    }
}

/// One factored measurement update: factors the innovation pre-array, forms
/// the gains, factors the posterior pre-array, and assimilates `z` in the
/// rotated innovation basis.
pub fn svd_measurement_update(
    x_pred: &DVector<f64>,
    p_pred: &SvdFactors,
    h: &DMatrix<f64>,
    r_factors: &SvdFactors,
    z: &DVector<f64>,
) -> Result<MeasurementUpdate> {
    let n = x_pred.len();
    let m = z.len();
    if p_pred.dim() != n || h.shape() != (m, n) || r_factors.dim() != m {
        return Err(Error::ShapeMismatch(format!(
            "measurement update with n={n}, m={m} got P dim {}, H {}x{}, R dim {}",
            p_pred.dim(),
            h.nrows(),
            h.ncols(),
            r_factors.dim()
        )));
    }
    let t1 = svd_factorize(&innovation_pre_array(r_factors, p_pred, h))?;
    let re = read_factors(&t1);
    let (gain_bar, gain) = gains(p_pred, h, &re)?;
    let t2 = svd_factorize(&posterior_pre_array(p_pred, r_factors, &gain, h))?;
    let p_filt = read_factors(&t2);
    let rotated_innovation = re.q.transpose() * (z - h * x_pred);
    let x_filt = x_pred + &gain_bar * rotated_innovation.component_div(&re.d());
    Ok(MeasurementUpdate {
        x_filt,
        p_filt,
        re,
        gain_bar,
        gain,
        rotated_innovation,
    })
}

/// One factored time update: factors the propagation pre-array and advances
/// the estimate through the dynamics.
pub fn svd_time_update(
    x_filt: &DVector<f64>,
    p_filt: &SvdFactors,
    f: &DMatrix<f64>,
    b: &DMatrix<f64>,
    g: &DMatrix<f64>,
    omega_factors: &SvdFactors,
    u: &DVector<f64>,
) -> Result<TimeUpdate> {
    let n = x_filt.len();
    if p_filt.dim() != n || f.shape() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "time update with n={n} got P dim {}, F {}x{}",
            p_filt.dim(),
            f.nrows(),
            f.ncols()
        )));
    }
    let t = svd_factorize(&time_update_pre_array(p_filt, omega_factors, f, g))?;
    Ok(TimeUpdate {
        x_pred: f * x_filt + b * u,
        p_pred: read_factors(&t),
    })
}

fn at(step: usize, array: PreArrayKind) -> impl Fn(Error) -> Error {
    move |e| Error::AtStep {
        step,
        array,
        source: Box::new(e),
    }
}

fn check_init_factor_dims(instance: &ModelInstance, factors: &InitFactors) -> Result<()> {
    let dims = instance.dims;
    if factors.pi0.factors.dim() != dims.n
        || factors.r.factors.dim() != dims.m
        || factors.omega.factors.dim() != dims.q
    {
        return Err(Error::ShapeMismatch(
            "initialized factors do not match the model dimensions".into(),
        ));
    }
    Ok(())
}

/// Runs the factored filter over a trajectory, starting from the initialized
/// covariance factors.
pub fn svd_kf_run(
    instance: &ModelInstance,
    factors: &InitFactors,
    data: &Trajectory,
) -> Result<SvdKfTrace> {
    validate_data(instance, data)?;
    check_init_factor_dims(instance, factors)?;
    let mats = &instance.mats;
    let r_fac = &factors.r.factors;
    let om_fac = &factors.omega.factors;
    let mut x = mats.x0_mean.clone();
    let mut p_pred = factors.pi0.factors.clone();
    let mut steps = Vec::with_capacity(data.steps());
    for k in 1..=data.steps() {
        let z = &data.measurements[k - 1];
        let u = &data.controls[k - 1];

        let t1 = svd_factorize(&innovation_pre_array(r_fac, &p_pred, &mats.h))
            .map_err(at(k, PreArrayKind::InnovationFactor))?;
        let re = read_factors(&t1);
        let (gain_bar, gain) =
            gains(&p_pred, &mats.h, &re).map_err(at(k, PreArrayKind::InnovationFactor))?;

        let t2 = svd_factorize(&posterior_pre_array(&p_pred, r_fac, &gain, &mats.h))
            .map_err(at(k, PreArrayKind::PosteriorFactor))?;
        let p_filt = read_factors(&t2);

        let rotated_innovation = re.q.transpose() * (z - &mats.h * &x);
        let x_filt = &x + &gain_bar * rotated_innovation.component_div(&re.d());

        let t3 = svd_factorize(&time_update_pre_array(&p_filt, om_fac, &mats.f, &mats.g))
            .map_err(at(k, PreArrayKind::TimeUpdate))?;
        let p_next = read_factors(&t3);
        let x_next = &mats.f * &x_filt + &mats.b * u;

        if !(all_finite_vec(&rotated_innovation)
            && all_finite_vec(&x_filt)
            && all_finite_vec(&x_next)
            && all_finite_vec(&p_next.d_sqrt)
            && all_finite_mat(&p_next.q))
        {
            return Err(Error::NonFiniteState { step: k });
        }

        steps.push(SvdKfStep {
            x_pred: x,
            x_filt,
            p_pred,
            re,
            gain_bar,
            gain,
            rotated_innovation,
        });
        x = x_next;
        p_pred = p_next;
    }
    Ok(SvdKfTrace { steps })
}

/// Runs the factored filter together with its factor-derivative recursions.
///
/// Per step and per parameter, the derivative of each pre-array is assembled
/// by the product rule from the current factor derivatives and the system
/// matrix partials, then pushed through the differentiated factorization.
/// Diagonal inverses are differentiated as `d(D^{-1}) = -D^{-1} dD D^{-1}`
/// with `dD = 2 D^{1/2} dD^{1/2}`.
pub fn diff_svd_kf_run(
    instance: &ModelInstance,
    factors: &InitFactors,
    data: &Trajectory,
) -> Result<DiffSvdKfTrace> {
    validate_data(instance, data)?;
    check_init_factor_dims(instance, factors)?;
    let mats = &instance.mats;
    let parts = &instance.partials;
    let np = instance.dims.p;
    let n = instance.dims.n;

    let r_fac = &factors.r;
    let om_fac = &factors.omega;
    let mut x = mats.x0_mean.clone();
    let mut dx: Vec<DVector<f64>> = (0..np).map(|_| DVector::zeros(n)).collect();
    let mut p_pred = factors.pi0.factors.clone();
    let mut dq_pred = factors.pi0.dq.clone();
    let mut dd_pred = factors.pi0.dd_sqrt.clone();

    let mut steps = Vec::with_capacity(data.steps());
    for k in 1..=data.steps() {
        let z = &data.measurements[k - 1];
        let u = &data.controls[k - 1];

        // innovation factorization and its derivatives
        let a1 = innovation_pre_array(&r_fac.factors, &p_pred, &mats.h);
        let t1 = svd_factorize(&a1).map_err(at(k, PreArrayKind::InnovationFactor))?;
        let re = read_factors(&t1);
        let qp_t_ht = p_pred.q.transpose() * mats.h.transpose();
        let mut dq_re = Vec::with_capacity(np);
        let mut dd_re_sqrt = Vec::with_capacity(np);
        for i in 0..np {
            let d = &parts[i];
            let top = scale_rows(&r_fac.dd_sqrt[i], &r_fac.factors.q.transpose())
                + scale_rows(&r_fac.factors.d_sqrt, &r_fac.dq[i].transpose());
            let bottom = scale_rows(&dd_pred[i], &qp_t_ht)
                + scale_rows(&p_pred.d_sqrt, &(dq_pred[i].transpose() * mats.h.transpose()))
                + scale_rows(&p_pred.d_sqrt, &(p_pred.q.transpose() * d.h.transpose()));
            let a1p = vstack(&[&top, &bottom]);
            let diff = differentiated_svd_with(&t1, &a1p)
                .map_err(at(k, PreArrayKind::InnovationFactor))?;
            dq_re.push(diff.v_prime);
            dd_re_sqrt.push(diff.s_prime);
        }

        let (gain_bar, gain) =
            gains(&p_pred, &mats.h, &re).map_err(at(k, PreArrayKind::InnovationFactor))?;
        let d_re = re.d();
        let inv_d_re = d_re.map(|v| 1.0 / v);
        let dd_re: Vec<DVector<f64>> = (0..np)
            .map(|i| re.d_sqrt.zip_map(&dd_re_sqrt[i], |s, ds| 2.0 * s * ds))
            .collect();

        // gain derivatives
        let ht_qre = mats.h.transpose() * &re.q;
        let mut d_gain_bar = Vec::with_capacity(np);
        let mut d_gain = Vec::with_capacity(np);
        for i in 0..np {
            let d = &parts[i];
            let dd_p = p_pred.d_sqrt.zip_map(&dd_pred[i], |s, ds| 2.0 * s * ds);
            let term1 = &dq_pred[i] * scale_rows(&p_pred.d(), &(p_pred.q.transpose() * &ht_qre));
            let term2 = &p_pred.q * scale_rows(&dd_p, &(p_pred.q.transpose() * &ht_qre));
            let term3 =
                &p_pred.q * scale_rows(&p_pred.d(), &(dq_pred[i].transpose() * &ht_qre));
            let term4 = &p_pred.q
                * scale_rows(
                    &p_pred.d(),
                    &(p_pred.q.transpose() * (d.h.transpose() * &re.q)),
                );
            let term5 = &p_pred.q
                * scale_rows(
                    &p_pred.d(),
                    &(p_pred.q.transpose() * (mats.h.transpose() * &dq_re[i])),
                );
            let dkb = term1 + term2 + term3 + term4 + term5;
            let dk = scale_columns(&dkb, &inv_d_re) * re.q.transpose()
                - scale_columns(
                    &gain_bar,
                    &dd_re[i].zip_map(&inv_d_re, |dd, inv| dd * inv * inv),
                ) * re.q.transpose()
                + scale_columns(&gain_bar, &inv_d_re) * dq_re[i].transpose();
            d_gain_bar.push(dkb);
            d_gain.push(dk);
        }

        // posterior factorization and its derivatives
        let a2 = posterior_pre_array(&p_pred, &r_fac.factors, &gain, &mats.h);
        let t2 = svd_factorize(&a2).map_err(at(k, PreArrayKind::PosteriorFactor))?;
        let p_filt = read_factors(&t2);
        let ikh_t = DMatrix::identity(n, n) - (&gain * &mats.h).transpose();
        let mut dq_filt = Vec::with_capacity(np);
        let mut dd_filt = Vec::with_capacity(np);
        for i in 0..np {
            let d = &parts[i];
            let d_ikh_t = -(d_gain[i].clone() * &mats.h + &gain * &d.h).transpose();
            let top = scale_rows(&dd_pred[i], &(p_pred.q.transpose() * &ikh_t))
                + scale_rows(&p_pred.d_sqrt, &(dq_pred[i].transpose() * &ikh_t))
                + scale_rows(&p_pred.d_sqrt, &(p_pred.q.transpose() * &d_ikh_t));
            let bottom = scale_rows(&r_fac.dd_sqrt[i], &(r_fac.factors.q.transpose() * gain.transpose()))
                + scale_rows(&r_fac.factors.d_sqrt, &(r_fac.dq[i].transpose() * gain.transpose()))
                + scale_rows(
                    &r_fac.factors.d_sqrt,
                    &(r_fac.factors.q.transpose() * d_gain[i].transpose()),
                );
            let a2p = vstack(&[&top, &bottom]);
            let diff = differentiated_svd_with(&t2, &a2p)
                .map_err(at(k, PreArrayKind::PosteriorFactor))?;
            dq_filt.push(diff.v_prime);
            dd_filt.push(diff.s_prime);
        }

        // rotated innovation, filtered estimate, and their derivatives
        let e = z - &mats.h * &x;
        let ebar = re.q.transpose() * &e;
        let x_filt = &x + &gain_bar * ebar.component_div(&d_re);
        let mut d_ebar = Vec::with_capacity(np);
        let mut dx_filt = Vec::with_capacity(np);
        for i in 0..np {
            let d = &parts[i];
            let deb = dq_re[i].transpose() * &e - re.q.transpose() * (&d.h * &x + &mats.h * &dx[i]);
            let dxf = &dx[i]
                + &d_gain_bar[i] * ebar.component_div(&d_re)
                + &gain_bar * deb.component_div(&d_re)
                - &gain_bar
                    * ebar.zip_zip_map(&dd_re[i], &inv_d_re, |eb, dd, inv| eb * dd * inv * inv);
            d_ebar.push(deb);
            dx_filt.push(dxf);
        }

        // time update and its derivatives
        let a3 = time_update_pre_array(&p_filt, &om_fac.factors, &mats.f, &mats.g);
        let t3 = svd_factorize(&a3).map_err(at(k, PreArrayKind::TimeUpdate))?;
        let p_next = read_factors(&t3);
        let x_next = &mats.f * &x_filt + &mats.b * u;
        let mut dq_next = Vec::with_capacity(np);
        let mut dd_next = Vec::with_capacity(np);
        let mut dx_next = Vec::with_capacity(np);
        for i in 0..np {
            let d = &parts[i];
            let top = scale_rows(&dd_filt[i], &(p_filt.q.transpose() * mats.f.transpose()))
                + scale_rows(&p_filt.d_sqrt, &(dq_filt[i].transpose() * mats.f.transpose()))
                + scale_rows(&p_filt.d_sqrt, &(p_filt.q.transpose() * d.f.transpose()));
            let bottom = scale_rows(&om_fac.dd_sqrt[i], &(om_fac.factors.q.transpose() * mats.g.transpose()))
                + scale_rows(&om_fac.factors.d_sqrt, &(om_fac.dq[i].transpose() * mats.g.transpose()))
                + scale_rows(
                    &om_fac.factors.d_sqrt,
                    &(om_fac.factors.q.transpose() * d.g.transpose()),
                );
            let a3p = vstack(&[&top, &bottom]);
            let diff =
                differentiated_svd_with(&t3, &a3p).map_err(at(k, PreArrayKind::TimeUpdate))?;
            dq_next.push(diff.v_prime);
            dd_next.push(diff.s_prime);
            dx_next.push(&d.f * &x_filt + &mats.f * &dx_filt[i] + &d.b * u);
        }

        let finite = all_finite_vec(&ebar)
            && all_finite_vec(&x_filt)
            && all_finite_vec(&x_next)
            && all_finite_vec(&p_next.d_sqrt)
            && all_finite_mat(&p_next.q)
            && dx_next.iter().all(all_finite_vec)
            && dd_next.iter().all(all_finite_vec)
            && dq_next.iter().all(all_finite_mat);
        if !finite {
            return Err(Error::NonFiniteState { step: k });
        }

        steps.push(DiffSvdKfStep {
            base: SvdKfStep {
                x_pred: x,
                x_filt,
                p_pred,
                re,
                gain_bar,
                gain,
                rotated_innovation: ebar,
            },
            dx_pred: dx,
            dx_filt,
            dq_pred,
            dd_sqrt_pred: dd_pred,
            dq_re,
            dd_sqrt_re: dd_re_sqrt,
            d_gain_bar,
            d_rotated_innovation: d_ebar,
        });
        x = x_next;
        dx = dx_next;
        p_pred = p_next;
        dq_pred = dq_next;
        dd_pred = dd_next;
    }
    Ok(DiffSvdKfTrace { steps })
}
