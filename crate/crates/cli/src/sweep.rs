//! Monte Carlo parameter-estimation study on the satellite model across a
//! list of conditioning parameters.
//!
//! For every `delta` the model is simulated `runs` times at the true
//! parameter (seeds `base_seed, base_seed+1, ...`), and every method
//! estimates the parameter from the same per-run data set starting at the
//! same initial guess, so the per-(method, delta) statistics are paired.
//! Runs execute in parallel; aggregation is ordered by run index, so a
//! given configuration always produces identical output.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Deserialize;
use svdkf::error::Error;
use svdkf::estimation::{estimate, Engine, EstimateOptions};
use svdkf::model::{satellite_model, simulate, SATELLITE_DEFAULT_Q1};
use svdkf::Result;

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub deltas: Vec<f64>,
    /// Monte Carlo runs per delta.
    pub runs: usize,
    /// Measurement steps per run.
    pub steps: usize,
    pub theta_true: f64,
    pub theta0: f64,
    pub base_seed: u64,
    pub methods: Vec<Engine>,
    pub q1: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            deltas: (1..=10).map(|k| 10f64.powi(-k)).collect(),
            runs: 100,
            steps: 100,
            theta_true: 5.0,
            theta0: 1.0,
            base_seed: 1000,
            methods: vec![Engine::DiffKf, Engine::DiffSvdKf],
            q1: SATELLITE_DEFAULT_Q1,
        }
    }
}

impl SweepConfig {
    /// Desk-scale variant: 30 runs, deltas no smaller than 1e-7.
    pub fn quick(mut self) -> Self {
        self.runs = 30;
        self.deltas.retain(|&d| d >= 0.99e-7);
        self
    }
}

pub fn parse_method(name: &str) -> Result<Engine> {
    match name.trim() {
        "diff_kf" => Ok(Engine::DiffKf),
        "diff_svd_kf" => Ok(Engine::DiffSvdKf),
        other => Err(Error::Config(format!(
            "unknown method `{other}` (expected diff_kf or diff_svd_kf)"
        ))),
    }
}

/// TOML mirror of [`SweepConfig`]; omitted fields keep their defaults.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweepConfig {
    delta_list: Option<Vec<f64>>,
    runs: Option<usize>,
    steps: Option<usize>,
    theta_true: Option<f64>,
    theta0: Option<f64>,
    seed: Option<u64>,
    methods: Option<Vec<String>>,
    q1: Option<f64>,
}

pub fn parse_sweep_config(text: &str) -> Result<SweepConfig> {
    let raw: RawSweepConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("TOML parse error: {e}")))?;
    let mut config = SweepConfig::default();
    if let Some(d) = raw.delta_list {
        config.deltas = d;
    }
    if let Some(v) = raw.runs {
        config.runs = v;
    }
    if let Some(v) = raw.steps {
        config.steps = v;
    }
    if let Some(v) = raw.theta_true {
        config.theta_true = v;
    }
    if let Some(v) = raw.theta0 {
        config.theta0 = v;
    }
    if let Some(v) = raw.seed {
        config.base_seed = v;
    }
    if let Some(v) = raw.methods {
        config.methods = v.iter().map(|s| parse_method(s)).collect::<Result<_>>()?;
    }
    if let Some(v) = raw.q1 {
        config.q1 = v;
    }
    Ok(config)
}

/// Estimates for one (method, delta) cell: one entry per run, `None` when
/// the run failed (filter breakdown or non-converged optimizer).
#[derive(Debug, Clone)]
pub struct MethodDeltaRow {
    pub method: Engine,
    pub delta: f64,
    pub estimates: Vec<Option<f64>>,
}

impl MethodDeltaRow {
    pub fn failures(&self) -> usize {
        self.estimates.iter().filter(|e| e.is_none()).count()
    }

    /// A method is failed at this delta as soon as any run fails.
    pub fn failed(&self) -> bool {
        self.failures() > 0
    }

    fn successes(&self) -> Vec<f64> {
        self.estimates.iter().filter_map(|e| *e).collect()
    }

    /// Mean estimate over non-failed runs.
    pub fn mean(&self) -> Option<f64> {
        let ok = self.successes();
        (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
    }

    /// Root mean squared error against the true parameter, non-failed runs.
    pub fn rmse(&self, theta_true: f64) -> Option<f64> {
        let ok = self.successes();
        (!ok.is_empty()).then(|| {
            (ok.iter().map(|e| (e - theta_true).powi(2)).sum::<f64>() / ok.len() as f64).sqrt()
        })
    }

    /// Mean absolute percentage error against the true parameter, percent.
    pub fn mape_pct(&self, theta_true: f64) -> Option<f64> {
        let ok = self.successes();
        (!ok.is_empty()).then(|| {
            100.0 * ok.iter().map(|e| (e - theta_true).abs()).sum::<f64>()
                / (ok.len() as f64 * theta_true.abs())
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub theta_true: f64,
    pub runs: usize,
    pub rows: Vec<MethodDeltaRow>,
}

impl SweepSummary {
    pub fn row(&self, method: Engine, delta: f64) -> Option<&MethodDeltaRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.delta == delta)
    }

    /// Smallest delta list index at which the method has any failed run.
    pub fn first_failing_delta(&self, method: Engine) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.failed())
            .map(|r| r.delta)
            .fold(None, |acc: Option<f64>, d| {
                Some(acc.map_or(d, |a| a.max(d)))
            })
    }

    /// CSV with columns `method,delta,mean,rmse,mape_pct,failures`; absent
    /// statistics (every run failed) print as `-`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,delta,mean,rmse,mape_pct,failures\n");
        for row in &self.rows {
            let fmt = |v: Option<f64>| match v {
                Some(x) => format!("{x:.6}"),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "{},{:e},{},{},{},{}\n",
                row.method,
                row.delta,
                fmt(row.mean()),
                fmt(row.rmse(self.theta_true)),
                fmt(row.mape_pct(self.theta_true)),
                row.failures()
            ));
        }
        out
    }

    /// Human-readable table, one line per (delta, method), with a failure
    /// ordering note comparing the methods.
    pub fn human_report(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "Monte Carlo estimation study: true parameter {}, {} runs per delta\n",
            self.theta_true, self.runs
        ));
        out.push_str(&format!(
            "{:>10}  {:>12}  {:>10}  {:>10}  {:>10}  {:>8}\n",
            "delta", "method", "mean", "rmse", "mape[%]", "failures"
        ));
        for row in &self.rows {
            let cell = |v: Option<f64>| match v {
                Some(x) => format!("{x:10.4}"),
                None => format!("{:>10}", "-"),
            };
            out.push_str(&format!(
                "{:>10.0e}  {:>12}  {}  {}  {}  {:>8}{}\n",
                row.delta,
                row.method.to_string(),
                cell(row.mean()),
                cell(row.rmse(self.theta_true)),
                cell(row.mape_pct(self.theta_true)),
                row.failures(),
                if row.failed() { "  FAILED" } else { "" }
            ));
        }
        let methods: Vec<Engine> = {
            let mut m: Vec<Engine> = Vec::new();
            for r in &self.rows {
                if !m.contains(&r.method) {
                    m.push(r.method);
                }
            }
            m
        };
        for method in methods {
            match self.first_failing_delta(method) {
                Some(d) => out.push_str(&format!(
                    "first failing delta for {:>12}: {:.0e}\n",
                    method.to_string(),
                    d
                )),
                None => out.push_str(&format!(
                    "first failing delta for {:>12}: none\n",
                    method.to_string()
                )),
            }
        }
        out
    }
}

fn validate(config: &SweepConfig) -> Result<()> {
    if config.runs == 0 || config.steps == 0 {
        return Err(Error::Config("runs and steps must be at least 1".into()));
    }
    if config.deltas.is_empty() || config.deltas.iter().any(|&d| d <= 0.0) {
        return Err(Error::Config("deltas must be positive".into()));
    }
    if config.methods.is_empty() {
        return Err(Error::Config("at least one method required".into()));
    }
    Ok(())
}

/// Runs the full study. Per-run estimation failures are recorded in the
/// summary, not reported as errors; an `Err` here means the harness itself
/// could not run (invalid configuration or simulation breakdown).
pub fn run_sweep(config: &SweepConfig) -> Result<SweepSummary> {
    validate(config)?;
    let theta_true = DVector::from_vec(vec![config.theta_true]);
    let theta0 = DVector::from_vec(vec![config.theta0]);
    let mut rows = Vec::new();
    for &delta in &config.deltas {
        let model = satellite_model(delta, config.q1);
        let inst_true = model.evaluate(&theta_true)?;
        let per_run: Vec<Vec<Option<f64>>> = (0..config.runs)
            .into_par_iter()
            .map(|run| -> Result<Vec<Option<f64>>> {
                let data = simulate(
                    &inst_true,
                    config.steps,
                    config.base_seed + run as u64,
                    None,
                )?;
                Ok(config
                    .methods
                    .iter()
                    .map(|&engine| {
                        let opts = EstimateOptions {
                            engine,
                            ..EstimateOptions::default()
                        };
                        let report = estimate(&model, &data, &theta0, &opts);
                        report.converged.then(|| report.theta_hat[0])
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        for (mi, &method) in config.methods.iter().enumerate() {
            rows.push(MethodDeltaRow {
                method,
                delta,
                estimates: per_run.iter().map(|r| r[mi]).collect(),
            });
        }
    }
    Ok(SweepSummary {
        theta_true: config.theta_true,
        runs: config.runs,
        rows,
    })
}

/// Optimizer iteration history for one (method, delta, run) cell as CSV.
pub fn optimizer_trace_csv(config: &SweepConfig, method: Engine, delta: f64, run: usize) -> Result<String> {
    let theta_true = DVector::from_vec(vec![config.theta_true]);
    let theta0 = DVector::from_vec(vec![config.theta0]);
    let model = satellite_model(delta, config.q1);
    let inst_true = model.evaluate(&theta_true)?;
    let data = simulate(&inst_true, config.steps, config.base_seed + run as u64, None)?;
    let opts = EstimateOptions {
        engine: method,
        ..EstimateOptions::default()
    };
    let report = estimate(&model, &data, &theta0, &opts);
    let mut buf = Vec::new();
    report
        .write_csv(&mut buf)
        .map_err(|e| Error::Config(format!("trace serialization failed: {e}")))?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}
