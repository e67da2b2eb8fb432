//! Built-in in-track satellite motion model with a conditioning parameter.

use nalgebra::{DMatrix, DVector};

use crate::model::factors::{scaled_diagonal_factors, FactorSpec, FactorSupply};
use crate::model::{ModelDims, ParametrizedModel, SystemMatrices, SystemPartials};

/// Default intensity of the single process-noise channel.
pub const SATELLITE_DEFAULT_Q1: f64 = 0.63e-2;

/// Linearized in-track motion of a satellite on a circular orbit, with one
/// unknown scale parameter `theta` driving both the measurement noise
/// `R = theta^2 delta^2 I_2` and the initial covariance `Pi0 = theta^2 I_4`.
///
/// `delta` controls the conditioning: the two measurement rows differ only by
/// `delta` in one entry, so the innovation covariance approaches singularity
/// as `delta^2` falls below working precision. Both noise covariances have
/// repeated eigenvalues, so analytic factor generators are installed.
pub fn satellite_model(delta: f64, q1: f64) -> ParametrizedModel {
    assert!(delta > 0.0, "conditioning parameter must be positive");
    assert!(q1 >= 0.0, "process noise intensity must be nonnegative");
    let dims = ModelDims { n: 4, m: 2, d: 0, q: 4, p: 1 };

    let f = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 1.0, 0.5, 0.5, //
            0.0, 1.0, 1.0, 1.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.606,
        ],
    );
    let h = DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0 + delta]);
    let omega = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 0.0, q1]));

    let system = {
        let f = f.clone();
        let h = h.clone();
        let omega = omega.clone();
        move |theta: &DVector<f64>| {
            let t = theta[0];
            SystemMatrices {
                f: f.clone(),
                b: DMatrix::zeros(4, 0),
                g: DMatrix::identity(4, 4),
                h: h.clone(),
                omega: omega.clone(),
                r: DMatrix::identity(2, 2) * (t * t * delta * delta),
                pi0: DMatrix::identity(4, 4) * (t * t),
                x0_mean: DVector::zeros(4),
            }
        }
    };

    let partials = move |theta: &DVector<f64>| {
        let t = theta[0];
        vec![SystemPartials {
            f: DMatrix::zeros(4, 4),
            b: DMatrix::zeros(4, 0),
            g: DMatrix::zeros(4, 4),
            h: DMatrix::zeros(2, 4),
            omega: DMatrix::zeros(4, 4),
            r: DMatrix::identity(2, 2) * (2.0 * t * delta * delta),
            pi0: DMatrix::identity(4, 4) * (2.0 * t),
        }]
    };

    let supply = FactorSupply {
        omega: FactorSpec::analytic(move |_| {
            scaled_diagonal_factors(DVector::from_vec(vec![0.0, 0.0, 0.0, q1]), 1.0, &[0.0])
        }),
        r: FactorSpec::analytic(move |theta: &DVector<f64>| {
            let t = theta[0];
            scaled_diagonal_factors(
                DVector::from_vec(vec![delta * delta, delta * delta]),
                t,
                &[1.0],
            )
        }),
        pi0: FactorSpec::analytic(move |theta: &DVector<f64>| {
            let t = theta[0];
            scaled_diagonal_factors(DVector::from_vec(vec![1.0; 4]), t, &[1.0])
        }),
    };

    ParametrizedModel::new(dims, system, partials).with_factor_supply(supply)
}
