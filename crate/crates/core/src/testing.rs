//! Deterministic random-instance generators for tests and benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::model::{ModelDims, ParametrizedModel, SystemMatrices, SystemPartials};

fn randn(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random symmetric positive definite matrix with eigenvalues bounded away
/// from zero; distinct eigenvalues almost surely.
fn random_spd(rng: &mut ChaCha20Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let l = randn(rng, n, n);
    &l * l.transpose() + DMatrix::<f64>::identity(n, n) * floor
}

/// A random well-conditioned parametrized model (n <= 4, m <= 2, p <= 2)
/// with stable dynamics, plus a parameter point in a region where every
/// covariance stays positive definite.
///
/// The parameter enters linearly in `F` and `H` and quadratically in the
/// noise scales, so the analytic partials are exact and exercised on
/// non-commuting matrices.
pub fn random_model(seed: u64) -> (ParametrizedModel, DVector<f64>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(7));
    let n = rng.random_range(1..=4usize);
    let m = rng.random_range(1..=2usize.min(n));
    let q = n;
    let p = rng.random_range(1..=2usize);
    let dims = ModelDims { n, m, d: 0, q, p };

    let mut f0 = randn(&mut rng, n, n);
    let row_norm = (0..n)
        .map(|i| f0.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    if row_norm > 0.0 {
        f0 *= 0.8 / row_norm.max(0.8);
    }
    let f1 = randn(&mut rng, n, n) * 0.05;
    let h0 = randn(&mut rng, m, n);
    let h1 = randn(&mut rng, m, n) * 0.05;
    let g = randn(&mut rng, n, q) * 0.5;
    let omega0 = random_spd(&mut rng, q, 0.1);
    let r0 = random_spd(&mut rng, m, 0.5);
    let pi0_base = random_spd(&mut rng, n, 0.5);
    let x0 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));

    // noise scale c(t) = 1 + 0.1 t^2 on the first parameter, H perturbation
    // on the last; both coincide when p = 1
    let last = p - 1;
    let system = {
        let (f0, f1, h0, h1, g, omega0, r0, pi0_base, x0) = (
            f0.clone(),
            f1.clone(),
            h0.clone(),
            h1.clone(),
            g.clone(),
            omega0.clone(),
            r0.clone(),
            pi0_base.clone(),
            x0.clone(),
        );
        move |theta: &DVector<f64>| {
            let c = 1.0 + 0.1 * theta[0] * theta[0];
            SystemMatrices {
                f: &f0 + &f1 * theta[0],
                b: DMatrix::zeros(n, 0),
                g: g.clone(),
                h: &h0 + &h1 * theta[last],
                omega: &omega0 * c,
                r: &r0 * c,
                pi0: &pi0_base * (1.0 + 0.1 * theta[last] * theta[last]),
                x0_mean: x0.clone(),
            }
        }
    };
    let partials = move |theta: &DVector<f64>| {
        (0..p)
            .map(|i| {
                let dc = if i == 0 { 0.2 * theta[0] } else { 0.0 };
                SystemPartials {
                    f: if i == 0 { f1.clone() } else { DMatrix::zeros(n, n) },
                    b: DMatrix::zeros(n, 0),
                    g: DMatrix::zeros(n, q),
                    h: if i == last { h1.clone() } else { DMatrix::zeros(m, n) },
                    omega: &omega0 * dc,
                    r: &r0 * dc,
                    pi0: if i == last {
                        &pi0_base * (0.2 * theta[last])
                    } else {
                        DMatrix::zeros(n, n)
                    },
                }
            })
            .collect()
    };

    let theta = DVector::from_fn(p, |_, _| 0.5 + rng.random::<f64>());
    (ParametrizedModel::new(dims, system, partials), theta)
}

/// Random polynomial pre-array family `A(t) = A0 + t A1 + t^2 A2` and its
/// analytic derivative, for factor-derivative validation.
pub struct PreArrayFamily {
    a0: DMatrix<f64>,
    a1: DMatrix<f64>,
    a2: DMatrix<f64>,
}

impl PreArrayFamily {
    /// Normalized to unit Frobenius scale at t = 1 so absolute residual
    /// bounds in finite-difference checks hold uniformly over seeds.
    pub fn random(seed: u64, rows: usize, cols: usize) -> Self {
        let mut rng =
            ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x2545f4914f6cdd1d).wrapping_add(3));
        let a0 = randn(&mut rng, rows, cols) * 0.6;
        let a1 = randn(&mut rng, rows, cols) * 0.4;
        let a2 = randn(&mut rng, rows, cols) * 0.2;
        let scale = 1.0 / (&a0 + &a1 + &a2).norm();
        Self {
            a0: a0 * scale,
            a1: a1 * scale,
            a2: a2 * scale,
        }
    }

    pub fn at(&self, t: f64) -> DMatrix<f64> {
        &self.a0 + &self.a1 * t + &self.a2 * (t * t)
    }

    pub fn derivative_at(&self, t: f64) -> DMatrix<f64> {
        &self.a1 + &self.a2 * (2.0 * t)
    }
}
