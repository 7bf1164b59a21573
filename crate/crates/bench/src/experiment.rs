//! Monte Carlo repetition of one solver on one data source.

use std::time::Instant;

use serde::Serialize;
use ssdgp::batch::{cross_gram, fit_gp_mle, gp_regress, negative_log_marginal, stationary_gram};
use ssdgp::gaussian::{gaussian_filter, nlpd, rts_smooth};
use ssdgp::map::{optimize_map, BatchMapProblem, SsMapProblem};
use ssdgp::matern::matern_covariance;
use ssdgp::particle::{backward_simulation_smoother, bootstrap_pf, trajectory_mean};
use ssdgp::{DgpModel, FilterKind, Schedule, TimeSeriesData, TransitionSet};

use crate::config::{DataSource, ExperimentConfig, SolverKind};
use crate::error::Result;
use crate::ingest::ingest_strain_csv;
use crate::signals::{gen_rectangle, gen_sinusoid, rmse};

/// Splitmix64 over the master seed, the trial index and a stream tag.
pub fn derive_seed(master: u64, trial: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(trial.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(stream.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn load_data(source: &DataSource, base: &std::path::Path, seed: u64) -> Result<TimeSeriesData> {
    match source {
        DataSource::Rectangle { samples, noise_var } => gen_rectangle(*samples, *noise_var, seed),
        DataSource::Sinusoid { samples, noise_var } => gen_sinusoid(*samples, *noise_var, seed),
        DataSource::File { path, noise_var, .. } => {
            let path = if path.is_absolute() { path.clone() } else { base.join(path) };
            ingest_strain_csv(&path, *noise_var)
        }
    }
}

/// Posterior estimate of `f` at the data points.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub f: Vec<f64>,
    pub nlpd: Option<f64>,
}

/// Smoothed or filtered means at the measurement steps, in data order.
fn at_measurements(schedule: &Schedule, values: impl Fn(usize) -> f64, n: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; n];
    for (k, step) in schedule.steps.iter().enumerate() {
        if let Some(i) = step.data_index {
            out[i] = values(k);
        }
    }
    out
}

/// Runs one solver on one data set. `seed` drives the particle methods only.
pub fn solve(
    config: &ExperimentConfig,
    model: Option<&DgpModel>,
    data: &TimeSeriesData,
    seed: u64,
) -> Result<Estimate> {
    let opts = &config.options;
    let n = data.len();
    if config.solver == SolverKind::GpMle {
        let fit = fit_gp_mle(opts.gp_alpha, &data.times, &data.y, &data.noise_var, &opts.lbfgs)?;
        let gram = stationary_gram(&fit.spec, &data.times);
        let cross = cross_gram(&fit.spec, &data.times, &data.times);
        let prior: Vec<f64> = data.times.iter().map(|t| matern_covariance(&fit.spec, *t, *t)).collect();
        let post = gp_regress(&gram, &data.noise_var, &data.y, &cross, &prior)?;
        let nlpd = negative_log_marginal(&gram, &data.noise_var, &data.y)?;
        return Ok(Estimate { f: post.mean.iter().copied().collect(), nlpd: Some(nlpd) });
    }
    let model = model.expect("validated config has a model");
    if config.solver == SolverKind::Bmap {
        let problem = BatchMapProblem::new(model, data)?;
        let sol = optimize_map(&problem, None, &opts.lbfgs);
        return Ok(Estimate { f: problem.f(&sol.x).iter().copied().collect(), nlpd: None });
    }

    let schedule = match &config.data {
        DataSource::File { interpolation: Some(spacing), .. } => Schedule::with_interpolation(data, *spacing)?,
        _ => Schedule::from_data(data),
    };
    let transitions = TransitionSet::new(model, config.scheme(), schedule.step_sizes())?;
    let fi = model.observed_index();
    match config.solver {
        SolverKind::Ekfs | SolverKind::Ckfs => {
            let kind = if config.solver == SolverKind::Ekfs { FilterKind::Ekf } else { FilterKind::Ckf };
            let out = gaussian_filter(kind, model, &transitions, &schedule)?;
            let smoothed = rts_smooth(&out)?;
            let f = at_measurements(&schedule, |k| smoothed[k + 1].mean[fi], n);
            Ok(Estimate { f, nlpd: Some(nlpd(&out)) })
        }
        SolverKind::Ssmap => {
            let problem = SsMapProblem::new(model, &transitions, &schedule)?;
            let sol = optimize_map(&problem, None, &opts.lbfgs);
            Ok(Estimate { f: problem.f_at_measurements(&sol.x), nlpd: None })
        }
        SolverKind::Pf => {
            let pf = bootstrap_pf(model, &transitions, &schedule, opts.particles, seed)?;
            let f = at_measurements(&schedule, |k| pf.clouds[k + 1].component_moments(fi).0, n);
            Ok(Estimate { f, nlpd: Some(-pf.log_likelihood) })
        }
        SolverKind::Pfbs => {
            let pf = bootstrap_pf(model, &transitions, &schedule, opts.particles, seed)?;
            let trajs = backward_simulation_smoother(&pf, &transitions, &schedule, opts.trajectories, seed)?;
            let mean = trajectory_mean(&trajs, fi);
            let f = at_measurements(&schedule, |k| mean[k + 1], n);
            Ok(Estimate { f, nlpd: Some(-pf.log_likelihood) })
        }
        SolverKind::GpMle | SolverKind::Bmap => unreachable!(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub rmse: Option<f64>,
    pub nlpd: Option<f64>,
    /// Failure message; `None` on success.
    pub error: Option<String>,
    #[serde(skip)]
    pub wall_time: f64,
}

impl TrialRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    /// Mean and sample deviation; deviation is zero for a single value.
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, count: values.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub rmse: Option<Stat>,
    pub nlpd: Option<Stat>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub solver: SolverKind,
    pub trials: Vec<TrialRecord>,
    pub summary: Summary,
}

impl ExperimentReport {
    pub fn from_trials(solver: SolverKind, mut trials: Vec<TrialRecord>) -> Self {
        trials.sort_by_key(|t| t.trial);
        let ok: Vec<&TrialRecord> = trials.iter().filter(|t| t.succeeded()).collect();
        let rmse: Vec<f64> = ok.iter().filter_map(|t| t.rmse).collect();
        let nlpd: Vec<f64> = ok.iter().filter_map(|t| t.nlpd).collect();
        let summary = Summary {
            rmse: Stat::of(&rmse),
            nlpd: Stat::of(&nlpd),
            failures: trials.len() - ok.len(),
        };
        Self { solver, trials, summary }
    }

    pub fn all_failed(&self) -> bool {
        self.trials.iter().all(|t| !t.succeeded())
    }

    pub fn wall_time(&self) -> Option<Stat> {
        let times: Vec<f64> = self.trials.iter().filter(|t| t.succeeded()).map(|t| t.wall_time).collect();
        Stat::of(&times)
    }
}

/// Runs one trial: data generation with its own seed, then a timed solver run.
pub fn run_trial(config: &ExperimentConfig, model: Option<&DgpModel>, trial: usize) -> TrialRecord {
    let seed = derive_seed(config.seed, trial as u64, 0);
    let mut record = TrialRecord { trial, seed, rmse: None, nlpd: None, error: None, wall_time: 0.0 };
    let data = match load_data(&config.data, &config.base_dir, derive_seed(config.seed, trial as u64, 1)) {
        Ok(d) => d,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    let start = Instant::now();
    let result = solve(config, model, &data, seed);
    record.wall_time = start.elapsed().as_secs_f64();
    match result {
        Ok(est) => {
            if est.f.iter().any(|v| !v.is_finite()) {
                record.error = Some("non-finite estimate".into());
                return record;
            }
            record.rmse = data.truth.as_ref().map(|t| rmse(t, &est.f));
            record.nlpd = est.nlpd.filter(|v| v.is_finite());
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

/// Runs all trials in order. Trials are independent, so results do not depend on the
/// order of execution.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let model = config.build_model()?;
    let trials = (0..config.trials).map(|i| run_trial(config, model.as_ref(), i)).collect();
    Ok(ExperimentReport::from_trials(config.solver, trials))
}
