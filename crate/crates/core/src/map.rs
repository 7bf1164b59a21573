//! MAP objectives for the batch and the state-space formulations, and a driver around L-BFGS.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::batch::{factor_with_jitter, gram_matrix, ns_dlog_dell, ns_matern_covariance};
use crate::data::{Schedule, TimeSeriesData};
use crate::discretize::{TransitionSet, COV_FLOOR_REL};
use crate::error::{Error, Result};
use crate::graph::{wrap, DgpModel, ParamSource};
use crate::linalg::{cholesky_regularized, floor_eigenvalues, log_det_from_cholesky, symmetrize};
use crate::optim::{minimize, LbfgsOptions, OptimResult};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A differentiable MAP objective over a flat parameter vector.
pub trait MapObjective: Sync {
    fn dim(&self) -> usize;
    fn loss_and_gradient(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
    fn loss(&self, x: &DVector<f64>) -> Result<f64> {
        self.loss_and_gradient(x).map(|(l, _)| l)
    }
}

#[derive(Debug, Clone)]
pub struct MapSolution {
    pub x: DVector<f64>,
    pub loss: f64,
    pub optim: OptimResult,
}

/// Minimizes a MAP objective from `init` (all zeros when `None`).
pub fn optimize_map(problem: &impl MapObjective, init: Option<DVector<f64>>, opts: &LbfgsOptions) -> MapSolution {
    let x0 = init.unwrap_or_else(|| DVector::zeros(problem.dim()));
    let optim = minimize(|x| problem.loss_and_gradient(x).ok(), x0, opts);
    MapSolution { x: optim.x.clone(), loss: optim.loss, optim }
}

/// Parameter values of one node along the time grid, with derivatives w.r.t. the
/// parent's latent value when the parameter is parent-driven.
struct ParamTrack {
    values: Vec<f64>,
    parent: Option<(usize, Vec<f64>)>,
}

/// Batch MAP over latent values of every node at the measurement times. Every node uses
/// the non-stationary exponential covariance.
pub struct BatchMapProblem<'a> {
    pub model: &'a DgpModel,
    pub data: &'a TimeSeriesData,
}

impl<'a> BatchMapProblem<'a> {
    pub fn new(model: &'a DgpModel, data: &'a TimeSeriesData) -> Result<Self> {
        if data.noise_var.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidData("batch MAP needs positive noise variances".into()));
        }
        Ok(Self { model, data })
    }

    fn n(&self) -> usize {
        self.data.len()
    }

    fn block<'x>(&self, x: &'x DVector<f64>, node: usize) -> nalgebra::DVectorView<'x, f64> {
        x.rows(node * self.n(), self.n())
    }

    fn track(&self, src: &ParamSource, x: &DVector<f64>) -> ParamTrack {
        match *src {
            ParamSource::Fixed { fixed } => ParamTrack { values: vec![fixed; self.n()], parent: None },
            ParamSource::Parent { parent, wrap: kind } => {
                let p = self.model.node_index(parent).expect("validated parent");
                let u = self.block(x, p);
                let w: Vec<_> = u.iter().map(|v| wrap(kind, *v)).collect();
                ParamTrack { values: w.iter().map(|w| w.value).collect(), parent: Some((p, w.iter().map(|w| w.d1).collect())) }
            }
        }
    }

    /// Latent `f` at the measurement times.
    pub fn f<'x>(&self, x: &'x DVector<f64>) -> nalgebra::DVectorView<'x, f64> {
        let top = self.model.node_index(crate::graph::NodeId::new(1, 1)).expect("top node");
        self.block(x, top)
    }
}

impl MapObjective for BatchMapProblem<'_> {
    fn dim(&self) -> usize {
        self.n() * self.model.nodes().len()
    }

    fn loss_and_gradient(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let n = self.n();
        let t = &self.data.times;
        let mut grad = DVector::zeros(self.dim());
        let mut loss = 0.0;

        let f = self.f(x);
        let top = self.model.node_index(crate::graph::NodeId::new(1, 1)).expect("top node");
        for i in 0..n {
            let r = self.data.noise_var[i];
            let d = self.data.y[i] - f[i];
            loss += 0.5 * (d * d / r + LN_2PI + r.ln());
            grad[top * n + i] -= d / r;
        }

        for (node_idx, node) in self.model.nodes().iter().enumerate() {
            let ell = self.track(&node.lengthscale, x);
            let sig = self.track(&node.magnitude, x);
            let raw = gram_matrix(n, |i, j| {
                ns_matern_covariance(t[i], t[j], ell.values[i], ell.values[j], sig.values[i], sig.values[j])
            });
            let gram = factor_with_jitter(raw.clone())?;
            let u = self.block(x, node_idx).into_owned();
            let tau = gram.solve(&u);
            loss += 0.5 * (u.dot(&tau) + gram.log_det() + n as f64 * LN_2PI);
            let mut block = grad.rows_mut(node_idx * n, n);
            block += &tau;

            if ell.parent.is_none() && sig.parent.is_none() {
                continue;
            }
            let w = gram.inverse() - &tau * tau.transpose();
            if let Some((p, dg)) = &ell.parent {
                for m in 0..n {
                    let mut g = 0.0;
                    for j in 0..n {
                        if j != m {
                            let d = raw[(m, j)] * ns_dlog_dell(t[m], t[j], ell.values[m], ell.values[j]);
                            g += 2.0 * w[(m, j)] * d;
                        }
                    }
                    grad[p * n + m] += 0.5 * g * dg[m];
                }
            }
            if let Some((p, dg)) = &sig.parent {
                for m in 0..n {
                    let mut g = 0.0;
                    for j in 0..n {
                        let d = raw[(m, j)] / sig.values[m];
                        g += if j == m { w[(m, m)] * 2.0 * d } else { 2.0 * w[(m, j)] * d };
                    }
                    grad[p * n + m] += 0.5 * g * dg[m];
                }
            }
        }
        Ok((loss, grad))
    }
}

/// State-space MAP over the trajectory `U_0, …, U_N` at the schedule points.
pub struct SsMapProblem<'a> {
    pub model: &'a DgpModel,
    pub transitions: &'a TransitionSet,
    pub schedule: &'a Schedule,
    p0_chol: Cholesky<f64, Dyn>,
}

struct StepTerms {
    loss: f64,
    /// Contribution to the gradient at `U_{k-1}`.
    prev: DVector<f64>,
    /// Contribution to the gradient at `U_k`.
    cur: DVector<f64>,
}

fn factor_transition_cov(q: &DMatrix<f64>, step: usize) -> Result<Cholesky<f64, Dyn>> {
    let sym = symmetrize(q);
    if let Some(c) = Cholesky::new(sym.clone()) {
        return Ok(c);
    }
    Cholesky::new(floor_eigenvalues(&sym, COV_FLOOR_REL).matrix).ok_or(Error::TransitionNotPd(step))
}

impl<'a> SsMapProblem<'a> {
    pub fn new(model: &'a DgpModel, transitions: &'a TransitionSet, schedule: &'a Schedule) -> Result<Self> {
        schedule.validate()?;
        if schedule.steps.iter().any(|s| s.obs.is_some_and(|o| !(o.noise_var > 0.0))) {
            return Err(Error::InvalidData("state-space MAP needs positive noise variances".into()));
        }
        let p0_chol = Cholesky::new(symmetrize(model.p0()))
            .or_else(|| cholesky_regularized(model.p0(), 1e-10))
            .ok_or_else(|| Error::NotPositiveDefinite("P0".into()))?;
        Ok(Self { model, transitions, schedule, p0_chol })
    }

    fn state(&self, x: &DVector<f64>, k: usize) -> DVector<f64> {
        let d = self.model.state_dim();
        x.rows(k * d, d).into_owned()
    }

    /// Trajectory as a list of states, origin first.
    pub fn trajectory(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..=self.schedule.len()).map(|k| self.state(x, k)).collect()
    }

    /// Stacks a trajectory into the flat parameter vector.
    pub fn stack(&self, states: &[DVector<f64>]) -> DVector<f64> {
        let d = self.model.state_dim();
        let mut x = DVector::zeros(states.len() * d);
        for (k, s) in states.iter().enumerate() {
            x.rows_mut(k * d, d).copy_from(s);
        }
        x
    }

    /// `f` at the measurement steps, in data order.
    pub fn f_at_measurements(&self, x: &DVector<f64>) -> Vec<f64> {
        let d = self.model.state_dim();
        let fi = self.model.observed_index();
        self.schedule
            .steps
            .iter()
            .enumerate()
            .filter(|(_, s)| s.obs.is_some())
            .map(|(k, _)| x[(k + 1) * d + fi])
            .collect()
    }

    fn step_terms(&self, x: &DVector<f64>, k: usize, dt: f64) -> Result<StepTerms> {
        let d = self.model.state_dim();
        let prev = self.state(x, k - 1);
        let cur = self.state(x, k);
        let tr = self.transitions.try_get(dt).ok_or_else(|| {
            Error::InvalidParameter(format!("no transition prepared for step {dt}"))
        })?;
        let md = tr.moments_with_derivatives(&prev);
        let chol = factor_transition_cov(&md.cov, k - 1)?;
        let e = &cur - &md.mean;
        let v = chol.solve(&e);
        let mut loss = 0.5 * (e.dot(&v) + log_det_from_cholesky(&chol) + d as f64 * LN_2PI);
        let mut g_prev = -(md.jacobian.transpose() * &v);
        if md.cov_grad.iter().any(|m| m.iter().any(|v| *v != 0.0)) {
            let qinv = chol.inverse();
            for (m, dq) in md.cov_grad.iter().enumerate() {
                let tr_term = qinv.component_mul(dq).sum();
                let quad = v.dot(&(dq * &v));
                g_prev[m] += 0.5 * (tr_term - quad);
            }
        }
        let mut g_cur = v;
        if let Some(obs) = self.schedule.steps[k - 1].obs {
            let fi = self.model.observed_index();
            let r = cur[fi] - obs.y;
            loss += 0.5 * (r * r / obs.noise_var + LN_2PI + obs.noise_var.ln());
            g_cur[fi] += r / obs.noise_var;
        }
        if !loss.is_finite() {
            return Err(Error::TransitionNotPd(k - 1));
        }
        Ok(StepTerms { loss, prev: g_prev, cur: g_cur })
    }
}

impl MapObjective for SsMapProblem<'_> {
    fn dim(&self) -> usize {
        (self.schedule.len() + 1) * self.model.state_dim()
    }

    fn loss_and_gradient(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let d = self.model.state_dim();
        let dts = self.schedule.step_sizes();
        let terms: Vec<Result<StepTerms>> = (1..=self.schedule.len())
            .into_par_iter()
            .map(|k| self.step_terms(x, k, dts[k - 1]))
            .collect();

        let mut grad = DVector::zeros(self.dim());
        let u0 = self.state(x, 0);
        let p0_inv_u0 = self.p0_chol.solve(&u0);
        let mut loss = 0.5 * (u0.dot(&p0_inv_u0) + log_det_from_cholesky(&self.p0_chol) + d as f64 * LN_2PI);
        grad.rows_mut(0, d).copy_from(&p0_inv_u0);
        for (i, t) in terms.into_iter().enumerate() {
            let t = t?;
            let k = i + 1;
            loss += t.loss;
            for j in 0..d {
                grad[(k - 1) * d + j] += t.prev[j];
                grad[k * d + j] += t.cur[j];
            }
        }
        Ok((loss, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::Scheme;
    use crate::graph::{build_dgp, DgpNode, NodeId, WrappingKind};
    use approx::assert_relative_eq;

    #[test]
    fn batch_single_point_value() {
        let m = build_dgp(vec![DgpNode::new(NodeId::new(1, 1), 0, ParamSource::fixed(1.0), ParamSource::fixed(1.0))]).unwrap();
        let d = TimeSeriesData::with_constant_noise(vec![0.0], vec![0.0], 1.0).unwrap();
        let p = BatchMapProblem::new(&m, &d).unwrap();
        let (loss, grad) = p.loss_and_gradient(&DVector::zeros(1)).unwrap();
        // zero-lag C = sqrt(2/π) for unit σ, plus jitter
        let c = (2.0 / std::f64::consts::PI).sqrt() * (1.0 + crate::batch::JITTER_REL);
        assert_relative_eq!(loss, 0.5 * LN_2PI + 0.5 * (LN_2PI + c.ln()), epsilon = 1e-12);
        assert_eq!(grad[0], 0.0);
    }

    #[test]
    fn ss_map_prior_only() {
        let m = build_dgp(vec![DgpNode::new(NodeId::new(1, 1), 1, ParamSource::fixed(1.0), ParamSource::fixed(1.0))]).unwrap();
        let s = Schedule { t0: 0.0, steps: vec![] };
        let set = TransitionSet::new(&m, Scheme::Tme(3), s.step_sizes()).unwrap();
        let p = SsMapProblem::new(&m, &set, &s).unwrap();
        let u0 = DVector::from_vec(vec![0.5, -1.0]);
        let loss = p.loss(&u0).unwrap();
        // P0 = diag(1, 3)
        let expected = 0.5 * (0.25 + 1.0 / 3.0 + 3f64.ln() + 2.0 * LN_2PI);
        assert_relative_eq!(loss, expected, epsilon = 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = build_dgp(vec![
            DgpNode::new(
                NodeId::new(1, 1),
                0,
                ParamSource::parent(NodeId::new(2, 1), WrappingKind::Exp),
                ParamSource::parent(NodeId::new(2, 2), WrappingKind::Exp),
            ),
            DgpNode::new(NodeId::new(2, 1), 0, ParamSource::fixed(0.5), ParamSource::fixed(0.8)),
            DgpNode::new(NodeId::new(2, 2), 0, ParamSource::fixed(0.7), ParamSource::fixed(0.6)),
        ])
        .unwrap();
        let times = vec![0.1, 0.25, 0.5, 0.6, 0.9];
        let d = TimeSeriesData::with_constant_noise(times, vec![0.2, -0.1, 0.4, 0.3, -0.2], 0.05).unwrap();
        let x = DVector::from_fn(15, |i, _| ((i * 7 % 5) as f64 - 2.0) * 0.15);
        let batch = BatchMapProblem::new(&m, &d).unwrap();
        let (_, g) = batch.loss_and_gradient(&x).unwrap();
        for i in 0..15 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (batch.loss(&xp).unwrap() - batch.loss(&xm).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + g[i].abs()), "batch {i}: {fd} vs {}", g[i]);
        }

        let s = Schedule::from_data(&d);
        let set = TransitionSet::new(&m, Scheme::Tme(3), s.step_sizes()).unwrap();
        let ss = SsMapProblem::new(&m, &set, &s).unwrap();
        let x = DVector::from_fn(ss.dim(), |i, _| ((i * 5 % 7) as f64 - 3.0) * 0.1);
        let (_, g) = ss.loss_and_gradient(&x).unwrap();
        for i in 0..ss.dim() {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (ss.loss(&xp).unwrap() - ss.loss(&xm).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + g[i].abs()), "ss {i}: {fd} vs {}", g[i]);
        }
    }
}
