//! Assumed-density Gaussian filtering and RTS smoothing (EKF/EKS and cubature CKF/CKS).

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Schedule;
use crate::discretize::{repair, TransitionSet};
use crate::error::{Error, Result};
use crate::graph::DgpModel;
use crate::linalg::{cholesky_regularized, is_finite_matrix, is_finite_vector, log_normal_scalar, symmetrize};

/// Diagonal loading applied to covariances before they are factorized.
pub const REGULARIZATION_REL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn is_finite(&self) -> bool {
        is_finite_vector(&self.mean) && is_finite_matrix(&self.cov)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Ekf,
    Ckf,
}

#[derive(Debug, Clone)]
pub struct FilterStep {
    pub t: f64,
    pub predicted: GaussianBelief,
    pub filtered: GaussianBelief,
    /// `cov[U_{k-1}, U_k | y_{1:k-1}]`, used for the smoother gain.
    pub cross_cov: DMatrix<f64>,
    pub pred_f_mean: f64,
    pub pred_f_var: f64,
    /// `log N(y_k | pred_f_mean, pred_f_var + R_k)` for measurement steps.
    pub log_pred: Option<f64>,
    pub data_index: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub kind: FilterKind,
    pub initial: GaussianBelief,
    pub steps: Vec<FilterStep>,
    /// Number of transition covariances whose eigenvalues had to be floored.
    pub repairs: usize,
    /// Number of transition covariances that were indefinite beyond tolerance.
    pub indefinite: usize,
}

impl FilterOutput {
    pub fn log_likelihood(&self) -> f64 {
        self.steps.iter().filter_map(|s| s.log_pred).sum()
    }
}

/// Joseph-form update with a scalar measurement `y = H U + r`, `r ~ N(0, R)`.
pub fn kalman_update(predicted: &GaussianBelief, y: f64, h_row: &DMatrix<f64>, noise_var: f64) -> Result<GaussianBelief> {
    let n = predicted.dim();
    let ph = &predicted.cov * h_row.transpose();
    let s = (h_row * &ph)[(0, 0)] + noise_var;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::DegenerateInnovation(s));
    }
    let gain = ph / s;
    let innovation = y - (h_row * &predicted.mean)[0];
    let mean = &predicted.mean + &gain * innovation;
    let ikh = DMatrix::identity(n, n) - &gain * h_row;
    let cov = &ikh * &predicted.cov * ikh.transpose() + &gain * gain.transpose() * noise_var;
    Ok(GaussianBelief::new(mean, symmetrize(&cov)))
}

struct Prediction {
    belief: GaussianBelief,
    cross_cov: DMatrix<f64>,
    repaired: bool,
    indefinite: bool,
}

fn ekf_predict(prev: &GaussianBelief, tr: &crate::discretize::DiscretizedTransition) -> Prediction {
    let m = tr.moments_with_derivatives(&prev.mean);
    let q = repair(m.mean.clone(), &m.cov);
    let cross = &prev.cov * m.jacobian.transpose();
    let cov = &m.jacobian * &cross + &q.cov;
    Prediction {
        belief: GaussianBelief::new(m.mean, symmetrize(&cov)),
        cross_cov: cross,
        repaired: q.shift > 0.0,
        indefinite: q.indefinite.is_some(),
    }
}

fn ckf_predict(
    prev: &GaussianBelief,
    tr: &crate::discretize::DiscretizedTransition,
    step: usize,
) -> Result<Prediction> {
    let n = prev.dim();
    if let Some((phi, qm)) = tr.affine() {
        // cubature is exact for affine maps
        let cross = &prev.cov * phi.transpose();
        let cov = phi * &cross + qm;
        return Ok(Prediction {
            belief: GaussianBelief::new(phi * &prev.mean, symmetrize(&cov)),
            cross_cov: cross,
            repaired: false,
            indefinite: false,
        });
    }
    let chol = cholesky_regularized(&prev.cov, REGULARIZATION_REL).ok_or(Error::FilterNumerical(step))?;
    let sqrt = chol.l() * (n as f64).sqrt();
    let offsets: Vec<DVector<f64>> = (0..2 * n)
        .map(|i| {
            let col = sqrt.column(i % n).into_owned();
            if i < n {
                col
            } else {
                -col
            }
        })
        .collect();
    let images: Vec<_> = offsets.par_iter().map(|o| tr.moments(&(&prev.mean + o))).collect();
    let w = 1.0 / (2 * n) as f64;
    let mut mean = DVector::zeros(n);
    let mut qsum = DMatrix::zeros(n, n);
    for im in &images {
        mean += &im.mean * w;
        qsum += &im.cov * w;
    }
    let mut cov = DMatrix::zeros(n, n);
    let mut cross = DMatrix::zeros(n, n);
    for (o, im) in offsets.iter().zip(&images) {
        let d = &im.mean - &mean;
        cov += &d * d.transpose() * w;
        cross += o * d.transpose() * w;
    }
    let q = repair(DVector::zeros(0), &qsum);
    Ok(Prediction {
        belief: GaussianBelief::new(mean, symmetrize(&(cov + &q.cov))),
        cross_cov: cross,
        repaired: q.shift > 0.0,
        indefinite: q.indefinite.is_some(),
    })
}

/// Runs a Gaussian filter from `N(0, P0)` at the schedule origin through every step.
pub fn gaussian_filter(
    kind: FilterKind,
    model: &DgpModel,
    transitions: &TransitionSet,
    schedule: &Schedule,
) -> Result<FilterOutput> {
    schedule.validate()?;
    let h = model.h_row();
    let fi = model.observed_index();
    let initial = model.initial_condition();
    let mut out = FilterOutput { kind, initial: initial.clone(), steps: Vec::with_capacity(schedule.len()), repairs: 0, indefinite: 0 };
    let mut current = initial;
    for (k, (step, dt)) in schedule.steps.iter().zip(schedule.step_sizes()).enumerate() {
        let tr = transitions.try_get(dt).ok_or_else(|| {
            Error::InvalidParameter(format!("no transition prepared for step {dt}"))
        })?;
        let pred = match kind {
            FilterKind::Ekf => ekf_predict(&current, tr),
            FilterKind::Ckf => ckf_predict(&current, tr, k)?,
        };
        out.repairs += usize::from(pred.repaired);
        out.indefinite += usize::from(pred.indefinite);
        if !pred.belief.is_finite() {
            return Err(Error::FilterDiverged(k));
        }
        let pred_f_mean = pred.belief.mean[fi];
        let pred_f_var = pred.belief.cov[(fi, fi)].max(0.0);
        let (filtered, log_pred) = match step.obs {
            Some(obs) => {
                let upd = kalman_update(&pred.belief, obs.y, h, obs.noise_var)?;
                let lp = log_normal_scalar(obs.y, pred_f_mean, pred_f_var + obs.noise_var);
                (upd, Some(lp))
            }
            None => (pred.belief.clone(), None),
        };
        if !filtered.is_finite() {
            return Err(Error::FilterDiverged(k));
        }
        current = filtered.clone();
        out.steps.push(FilterStep {
            t: step.t,
            predicted: pred.belief,
            filtered,
            cross_cov: pred.cross_cov,
            pred_f_mean,
            pred_f_var,
            log_pred,
            data_index: step.data_index,
        });
    }
    Ok(out)
}

pub fn ekf_filter(model: &DgpModel, transitions: &TransitionSet, schedule: &Schedule) -> Result<FilterOutput> {
    gaussian_filter(FilterKind::Ekf, model, transitions, schedule)
}

pub fn ckf_filter(model: &DgpModel, transitions: &TransitionSet, schedule: &Schedule) -> Result<FilterOutput> {
    gaussian_filter(FilterKind::Ckf, model, transitions, schedule)
}

/// RTS smoother using the gains `cov[U_k, U_{k+1}] P̄_{k+1}⁻¹` recorded by the filter.
///
/// Returns one belief per schedule point, with the origin `t0` at index 0.
pub fn rts_smooth(filter_out: &FilterOutput) -> Result<Vec<GaussianBelief>> {
    let n = filter_out.steps.len();
    let mut smoothed = vec![filter_out.initial.clone(); n + 1];
    if n == 0 {
        return Ok(smoothed);
    }
    smoothed[n] = filter_out.steps[n - 1].filtered.clone();
    for k in (0..n).rev() {
        let next = &filter_out.steps[k];
        let filtered = if k == 0 { &filter_out.initial } else { &filter_out.steps[k - 1].filtered };
        let chol = Cholesky::new(next.predicted.cov.clone())
            .or_else(|| cholesky_regularized(&next.predicted.cov, REGULARIZATION_REL))
            .ok_or(Error::FilterNumerical(k))?;
        // G = C P̄⁻¹ = (P̄⁻¹ Cᵀ)ᵀ
        let gain = chol.solve(&next.cross_cov.transpose()).transpose();
        let s = &smoothed[k + 1];
        let mean = &filtered.mean + &gain * (&s.mean - &next.predicted.mean);
        let cov = &filtered.cov + &gain * (&s.cov - &next.predicted.cov) * gain.transpose();
        smoothed[k] = GaussianBelief::new(mean, symmetrize(&cov));
    }
    Ok(smoothed)
}

/// Negative log predictive density of the measurements under the filter's one-step predictions.
pub fn nlpd(filter_out: &FilterOutput) -> f64 {
    -filter_out.log_likelihood()
}
