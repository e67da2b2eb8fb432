//! Trajectory simulation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::ModelInstance;
use crate::svd_diff::sym_spectral_factors;

/// A simulated run: states `x_0..x_N`, measurements `z_1..z_N`, controls
/// `u_0..u_{N-1}`, and the seed that produced it.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub seed: u64,
}

impl Trajectory {
    /// Number of measurement steps `N`.
    pub fn steps(&self) -> usize {
        self.measurements.len()
    }
}

/// Square-root sampler for a possibly rank-deficient PSD covariance:
/// draws `Q D^{1/2} xi` with `xi` standard normal.
struct GaussianSampler {
    root: DMatrix<f64>, // Q diag(D^{1/2})
    dim: usize,
}

impl GaussianSampler {
    fn new(cov: &DMatrix<f64>) -> Result<Self> {
        let f = sym_spectral_factors(cov)?;
        Ok(Self {
            root: linalg::scale_columns(&f.q, &f.d_sqrt),
            dim: f.dim(),
        })
    }

    fn sample(&self, rng: &mut ChaCha20Rng) -> DVector<f64> {
        let xi = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.root * xi
    }
}

/// Simulates `steps` measurement steps of the instance's state-space system.
///
/// Deterministic for a fixed seed: the generator is pinned to ChaCha20
/// (`ChaCha20Rng::seed_from_u64`), and draws are consumed in a fixed order
/// (initial state first, then per step the process noise followed by the
/// measurement noise). Missing controls default to zero.
pub fn simulate(
    instance: &ModelInstance,
    steps: usize,
    seed: u64,
    controls: Option<&[DVector<f64>]>,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::ShapeMismatch("need at least one step".into()));
    }
    let dims = instance.dims;
    let m = &instance.mats;
    if let Some(u) = controls {
        if u.len() != steps {
            return Err(Error::ShapeMismatch(format!(
                "{} controls supplied for {} steps",
                u.len(),
                steps
            )));
        }
        if u.iter().any(|uk| uk.len() != dims.d) {
            return Err(Error::ShapeMismatch(format!(
                "controls must have length {}",
                dims.d
            )));
        }
    }
    let init_sampler = GaussianSampler::new(&m.pi0)?;
    let process_sampler = GaussianSampler::new(&m.omega)?;
    let measurement_sampler = GaussianSampler::new(&m.r)?;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut x = &m.x0_mean + init_sampler.sample(&mut rng);
    let mut states = Vec::with_capacity(steps + 1);
    let mut measurements = Vec::with_capacity(steps);
    let mut us = Vec::with_capacity(steps);
    states.push(x.clone());
    for k in 0..steps {
        let u = controls
            .map(|c| c[k].clone())
            .unwrap_or_else(|| DVector::zeros(dims.d));
        let w = process_sampler.sample(&mut rng);
        x = &m.f * &x + &m.b * &u + &m.g * w;
        let v = measurement_sampler.sample(&mut rng);
        let z = &m.h * &x + v;
        states.push(x.clone());
        measurements.push(z);
        us.push(u);
    }
    Ok(Trajectory {
        states,
        measurements,
        controls: us,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{satellite_model, ModelDims, ParametrizedModel, SystemMatrices, SystemPartials, SATELLITE_DEFAULT_Q1};

    fn noise_free_doubling_model() -> ParametrizedModel {
        let dims = ModelDims { n: 1, m: 1, d: 0, q: 1, p: 1 };
        ParametrizedModel::new(
            dims,
            |_| SystemMatrices {
                f: DMatrix::from_element(1, 1, 2.0),
                b: DMatrix::zeros(1, 0),
                g: DMatrix::identity(1, 1),
                h: DMatrix::from_element(1, 1, 3.0),
                omega: DMatrix::zeros(1, 1),
                r: DMatrix::from_element(1, 1, 1e-30),
                pi0: DMatrix::zeros(1, 1),
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
        )
    }

    #[test]
    fn noise_free_recursion_is_exact() {
        let model = noise_free_doubling_model();
        let inst = model.evaluate(&DVector::from_vec(vec![1.0])).unwrap();
        let traj = simulate(&inst, 5, 42, None).unwrap();
        for k in 0..=5usize {
            assert!((traj.states[k][0] - 2f64.powi(k as i32)).abs() < 1e-12);
        }
        for k in 1..=5usize {
            assert!((traj.measurements[k - 1][0] - 3.0 * 2f64.powi(k as i32)).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let model = satellite_model(0.1, SATELLITE_DEFAULT_Q1);
        let inst = model.evaluate(&DVector::from_vec(vec![5.0])).unwrap();
        let a = simulate(&inst, 20, 7, None).unwrap();
        let b = simulate(&inst, 20, 7, None).unwrap();
        for (za, zb) in a.measurements.iter().zip(&b.measurements) {
            assert_eq!(za, zb);
        }
        let c = simulate(&inst, 20, 8, None).unwrap();
        assert_ne!(a.measurements[0], c.measurements[0]);
    }

    #[test]
    fn measurement_noise_moments() {
        // sample covariance of z - Hx against R, satellite at theta = 5
        let model = satellite_model(0.1, SATELLITE_DEFAULT_Q1);
        let inst = model.evaluate(&DVector::from_vec(vec![5.0])).unwrap();
        let mut sum = DMatrix::<f64>::zeros(2, 2);
        let mut count = 0usize;
        for seed in 0..100u64 {
            let traj = simulate(&inst, 100, seed, None).unwrap();
            for k in 1..=traj.steps() {
                let v = &traj.measurements[k - 1] - &inst.mats.h * &traj.states[k];
                sum += &v * v.transpose();
                count += 1;
            }
        }
        let sample_cov = sum / count as f64;
        // 10^4 samples: relative error of a variance estimate ~ sqrt(2/n) ~ 1.4%
        let r = &inst.mats.r;
        for i in 0..2 {
            assert!(
                (sample_cov[(i, i)] - r[(i, i)]).abs() < 3.0 * r[(i, i)] * (2.0 / count as f64).sqrt(),
                "sample variance {} vs {}",
                sample_cov[(i, i)],
                r[(i, i)]
            );
        }
    }

    #[test]
    fn rejects_bad_controls() {
        let model = satellite_model(0.1, SATELLITE_DEFAULT_Q1);
        let inst = model.evaluate(&DVector::from_vec(vec![5.0])).unwrap();
        let controls = vec![DVector::<f64>::zeros(0); 3];
        assert!(simulate(&inst, 5, 1, Some(&controls)).is_err());
    }
}
