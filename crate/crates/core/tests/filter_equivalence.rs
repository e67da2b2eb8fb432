//! Cross-engine equivalence: the conventional and factored filters are
//! algebraically the same recursion, so on well-conditioned problems their
//! states, covariances, likelihoods and sensitivities must coincide to
//! roundoff-dominated tolerances.

use nalgebra::{DMatrix, DVector};
use svdkf::estimation::{
    estimate, fd_gradient_oracle, grad_nll_conventional, grad_nll_svd, nll_conventional, nll_svd,
    Engine, EstimateOptions,
};
use svdkf::filters::{diff_kf_run, diff_svd_kf_run, kf_run, svd_kf_run};
use svdkf::model::{init_factors, satellite_model, simulate, SATELLITE_DEFAULT_Q1};
use svdkf::testing::random_model;

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.amax()
}

#[test]
fn states_and_covariances_agree_on_25_random_models() {
    for seed in 0..25u64 {
        let (model, theta) = random_model(seed);
        let inst = model.evaluate(&theta).unwrap();
        let fac = init_factors(&inst, model.factor_supply()).unwrap();
        let data = simulate(&inst, 50, seed, None).unwrap();
        let kf = kf_run(&inst, &data).unwrap();
        let svd = svd_kf_run(&inst, &fac, &data).unwrap();
        for (ks, ss) in kf.steps.iter().zip(&svd.steps) {
            assert!(
                (ks.x_filt.clone() - &ss.x_filt).amax() <= 1e-8,
                "filtered states disagree (seed {seed})"
            );
            assert!(
                (ks.x_pred.clone() - &ss.x_pred).amax() <= 1e-8,
                "predicted states disagree (seed {seed})"
            );
            let p_svd = ss.p_pred.to_covariance();
            assert!(
                max_abs(&(ks.p_pred.clone() - p_svd)) <= 1e-7,
                "covariances disagree (seed {seed})"
            );
        }
    }
}

#[test]
fn rotated_innovation_and_likelihood_identities() {
    for seed in 0..25u64 {
        let (model, theta) = random_model(seed);
        let inst = model.evaluate(&theta).unwrap();
        let fac = init_factors(&inst, model.factor_supply()).unwrap();
        let data = simulate(&inst, 50, seed ^ 0xabcd, None).unwrap();
        let kf = kf_run(&inst, &data).unwrap();
        let svd = svd_kf_run(&inst, &fac, &data).unwrap();
        for (ks, ss) in kf.steps.iter().zip(&svd.steps) {
            // the rotation is orthogonal
            assert!(
                (ks.innovation.norm() - ss.rotated_innovation.norm()).abs() <= 1e-10,
                "innovation norms differ (seed {seed})"
            );
            // per-step log-determinant and quadratic-form identities
            let logdet_full = ks
                .innovation_cov
                .clone()
                .cholesky()
                .map(|c| (0..ks.innovation.len()).map(|i| 2.0 * c.l()[(i, i)].ln()).sum::<f64>())
                .unwrap();
            let logdet_diag: f64 = ss.re.d().iter().map(|d| d.ln()).sum();
            assert!((logdet_full - logdet_diag).abs() <= 1e-9);
            let quad_full = ks
                .innovation
                .dot(&ks.innovation_cov.clone().cholesky().unwrap().solve(&ks.innovation));
            let quad_diag: f64 = ss
                .rotated_innovation
                .iter()
                .zip(ss.re.d().iter())
                .map(|(e, d)| e * e / d)
                .sum();
            assert!((quad_full - quad_diag).abs() <= 1e-9);
        }
        let a = nll_conventional(&kf).unwrap();
        let b = nll_svd(&svd).unwrap();
        assert!((a - b).abs() <= 1e-8, "likelihoods differ: {a} vs {b}");
    }
}

#[test]
fn factored_diagonal_stays_nonnegative() {
    for seed in 0..50u64 {
        let (model, theta) = random_model(seed);
        let inst = model.evaluate(&theta).unwrap();
        let fac = init_factors(&inst, model.factor_supply()).unwrap();
        let data = simulate(&inst, 30, seed ^ 0x5555, None).unwrap();
        let svd = svd_kf_run(&inst, &fac, &data).unwrap();
        for step in &svd.steps {
            assert!(step.p_pred.d_sqrt.iter().all(|&x| x >= 0.0));
            assert!(step.re.d_sqrt.iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn sensitivity_tracks_agree_on_25_random_models() {
    for seed in 0..25u64 {
        let (model, theta) = random_model(seed);
        let inst = model.evaluate(&theta).unwrap();
        let fac = init_factors(&inst, model.factor_supply()).unwrap();
        let data = simulate(&inst, 50, seed ^ 0x77, None).unwrap();
        let dk = diff_kf_run(&inst, &data).unwrap();
        let ds = diff_svd_kf_run(&inst, &fac, &data).unwrap();
        // derivative state tracks, relative to the track scale
        let p = inst.dims.p;
        for i in 0..p {
            let mut scale = 1e-12f64;
            for step in &dk.steps {
                scale = scale.max(step.dx_pred[i].amax());
            }
            for (ks, ss) in dk.steps.iter().zip(&ds.steps) {
                let diff = (ks.dx_pred[i].clone() - &ss.dx_pred[i]).amax();
                assert!(
                    diff <= 1e-6 * scale.max(1.0),
                    "sensitivity tracks disagree by {diff} (seed {seed})"
                );
            }
        }
        // and the assembled gradients
        let g_kf = grad_nll_conventional(&dk).unwrap();
        let g_svd = grad_nll_svd(&ds).unwrap();
        let denom = g_kf.amax().max(1e-9);
        assert!(
            (g_kf - g_svd).amax() / denom <= 1e-6,
            "gradients disagree (seed {seed})"
        );
    }
}

#[test]
fn gradient_matches_fd_on_50_random_models() {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let (model, theta_sim) = random_model(seed);
        let inst_sim = model.evaluate(&theta_sim).unwrap();
        let data = simulate(&inst_sim, 50, seed ^ 0x3333, None).unwrap();
        // evaluate away from the simulation point so the gradient is well
        // above the finite-difference noise floor
        let theta_eval = &theta_sim * 1.15;
        let inst = model.evaluate(&theta_eval).unwrap();
        let fac = init_factors(&inst, model.factor_supply()).unwrap();
        let trace = diff_svd_kf_run(&inst, &fac, &data).unwrap();
        let g = grad_nll_svd(&trace).unwrap();
        let h = 1e-6 * (1.0 + theta_eval.amax());
        let fd = fd_gradient_oracle(&model, &data, &theta_eval, h).unwrap();
        let rel = (g.clone() - &fd).amax() / fd.amax().max(1e-12);
        worst = worst.max(rel);
        assert!(rel <= 1e-5, "seed {seed}: relative error {rel}");
    }
    println!("worst relative gradient error over 50 models: {worst:.3e}");
}

#[test]
fn satellite_analytic_factor_supply_consistency() {
    // supplied factors reconstruct the covariances and their derivatives at
    // random parameter points; init_factors validates internally
    let model = satellite_model(0.1, SATELLITE_DEFAULT_Q1);
    let mut t = 0.31f64;
    for _ in 0..100 {
        t = (t * 7.13).rem_euclid(9.5) + 0.5;
        let theta = DVector::from_vec(vec![t]);
        let inst = model.evaluate(&theta).unwrap();
        let fac = init_factors(&inst, model.factor_supply()).unwrap();
        let recon = fac.pi0.factors.to_covariance();
        assert!(max_abs(&(recon - &inst.mats.pi0)) <= 1e-10 * (1.0 + inst.mats.pi0.amax()));
    }
}

#[test]
fn satellite_single_dataset_estimate_is_near_truth() {
    let model = satellite_model(0.1, SATELLITE_DEFAULT_Q1);
    let theta_true = DVector::from_vec(vec![5.0]);
    let inst = model.evaluate(&theta_true).unwrap();
    let data = simulate(&inst, 100, 2024, None).unwrap();
    for engine in [Engine::DiffKf, Engine::DiffSvdKf] {
        let opts = EstimateOptions { engine, ..Default::default() };
        let report = estimate(&model, &data, &DVector::from_vec(vec![1.0]), &opts);
        assert!(report.converged, "{engine} did not converge");
        assert!(
            report.theta_hat[0] > 4.0 && report.theta_hat[0] < 6.0,
            "{engine} estimate {}",
            report.theta_hat[0]
        );
    }
    // engines land on the same optimum
    let a = estimate(
        &model,
        &data,
        &DVector::from_vec(vec![1.0]),
        &EstimateOptions { engine: Engine::DiffKf, ..Default::default() },
    );
    let b = estimate(
        &model,
        &data,
        &DVector::from_vec(vec![1.0]),
        &EstimateOptions { engine: Engine::DiffSvdKf, ..Default::default() },
    );
    assert!((a.theta_hat[0] - b.theta_hat[0]).abs() <= 1e-4);
}

#[test]
fn optimizer_descent_and_armijo_history() {
    let model = satellite_model(0.1, SATELLITE_DEFAULT_Q1);
    let theta_true = DVector::from_vec(vec![5.0]);
    let inst = model.evaluate(&theta_true).unwrap();
    for seed in 0..50u64 {
        let data = simulate(&inst, 40, seed, None).unwrap();
        let report = estimate(
            &model,
            &data,
            &DVector::from_vec(vec![1.0]),
            &EstimateOptions::default(),
        );
        for w in report.history.windows(2) {
            assert!(
                w[1].nll <= w[0].nll + 1e-9,
                "history not non-increasing (seed {seed})"
            );
        }
    }
}
