//! Gaussian approximations of the one-step transition `p(U_{k+1} | U_k)`.
//!
//! TME moments are computed by applying the Itô generator
//! `𝒜φ = ∇φ·Λ(U)U + ½ tr(ββᵀ ∇²φ)` to jets of the coordinate functions and their
//! pairwise products, so all derivatives are exact polynomial algebra. The covariance uses
//! the expansion of `E[φ_i φ_j] − a_i a_j` truncated at the same order as the mean.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DgpModel;
use crate::jet::{JetNum, JetSpace};
use crate::linalg::{binomial, expm, factorial, floor_eigenvalues, symmetrize};

/// Relative eigenvalue floor used when repairing transition covariances.
pub const COV_FLOOR_REL: f64 = 1e-12;
/// Negative eigenvalues beyond this fraction of the trace are reported as indefinite.
pub const INDEFINITE_REL: f64 = 1e-9;
pub const MAX_TME_ORDER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scheme {
    EulerMaruyama,
    Tme(usize),
    /// Matrix-exponential discretization; only for models without parent links.
    Exact,
}

impl Default for Scheme {
    fn default() -> Self {
        Scheme::Tme(3)
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "em" | "euler-maruyama" => Ok(Scheme::EulerMaruyama),
            "exact" => Ok(Scheme::Exact),
            other => {
                let order = other
                    .strip_prefix("tme-")
                    .or_else(|| other.strip_prefix("tme"))
                    .and_then(|o| o.parse::<usize>().ok())
                    .ok_or_else(|| Error::UnsupportedScheme(s.to_string()))?;
                if (1..=MAX_TME_ORDER).contains(&order) {
                    Ok(Scheme::Tme(order))
                } else {
                    Err(Error::UnsupportedScheme(format!("TME order {order}")))
                }
            }
        }
    }
}

impl TryFrom<String> for Scheme {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scheme> for String {
    fn from(s: Scheme) -> String {
        s.to_string()
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scheme::EulerMaruyama => write!(f, "em"),
            Scheme::Tme(o) => write!(f, "tme-{o}"),
            Scheme::Exact => write!(f, "exact"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Moments after symmetrization and eigenvalue flooring.
#[derive(Debug, Clone)]
pub struct RepairedMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Largest eigenvalue shift applied by the floor.
    pub shift: f64,
    /// Set when the raw covariance had an eigenvalue below `-INDEFINITE_REL * trace`.
    pub indefinite: Option<f64>,
}

impl RepairedMoments {
    pub fn indefinite_error(&self, state: &DVector<f64>) -> Option<Error> {
        self.indefinite.map(|min_eigenvalue| Error::TmeIndefinite {
            state: state.iter().copied().collect(),
            min_eigenvalue,
        })
    }
}

/// Moments plus `∂a_i/∂U_j` and `∂Q/∂U_m` for every `m` (unrepaired).
#[derive(Debug, Clone)]
pub struct MomentsWithDerivatives {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub jacobian: DMatrix<f64>,
    pub cov_grad: Vec<DMatrix<f64>>,
}

#[derive(Debug)]
struct Kernel {
    model: DgpModel,
    scheme: Scheme,
    values: OnceLock<JetSpace>,
    gradients: OnceLock<JetSpace>,
}

impl Kernel {
    fn order(&self) -> usize {
        match self.scheme {
            Scheme::Tme(o) => o,
            _ => 0,
        }
    }

    fn space(&self, with_grad: bool) -> &JetSpace {
        let n = self.model.state_dim();
        let base = 2 * self.order();
        if with_grad {
            self.gradients.get_or_init(|| JetSpace::new(n, base + 1))
        } else {
            self.values.get_or_init(|| JetSpace::new(n, base))
        }
    }

    fn evaluate(&self, x: &DVector<f64>, dt: f64, with_grad: bool) -> MomentsWithDerivatives {
        let n = self.model.state_dim();
        let space = self.space(with_grad);
        let q = usize::from(with_grad);
        let d = space.degree();
        let vars: Vec<JetNum> = (0..n)
            .map(|k| JetNum { space, coeffs: space.variable(k, x[k]) })
            .collect();
        let drift: Vec<Vec<f64>> = self.model.drift_generic(&vars).into_iter().map(|j| j.coeffs).collect();
        let diffusion: Vec<(usize, Vec<f64>)> = self
            .model
            .diffusion_generic(&vars)
            .into_iter()
            .map(|(i, j)| (i, j.coeffs))
            .collect();

        let mut out = MomentsWithDerivatives {
            mean: DVector::zeros(n),
            cov: DMatrix::zeros(n, n),
            jacobian: DMatrix::zeros(n, n),
            cov_grad: if with_grad { vec![DMatrix::zeros(n, n); n] } else { Vec::new() },
        };

        if let Scheme::EulerMaruyama = self.scheme {
            for i in 0..n {
                out.mean[i] = x[i] + dt * drift[i][0];
                if with_grad {
                    out.jacobian[(i, i)] += 1.0;
                    for (j, g) in space.gradient(&drift[i]).iter().enumerate() {
                        out.jacobian[(i, j)] += dt * g;
                    }
                }
            }
            for (i, b) in &diffusion {
                out.cov[(*i, *i)] = dt * b[0];
                if with_grad {
                    for (m, g) in space.gradient(b).iter().enumerate() {
                        out.cov_grad[m][(*i, *i)] = dt * g;
                    }
                }
            }
            return out;
        }

        let order = self.order();
        let generator = |phi: &[f64], k_out: usize| -> Vec<f64> {
            let mut acc = space.zero();
            for (v, dv) in drift.iter().enumerate() {
                let dphi = space.deriv(phi, v, k_out);
                space.mul_acc(&mut acc, 1.0, dv, &dphi, k_out);
            }
            for (v, b) in &diffusion {
                let d2 = space.deriv(&space.deriv(phi, *v, k_out + 1), *v, k_out);
                space.mul_acc(&mut acc, 0.5, b, &d2, k_out);
            }
            acc
        };
        let weights: Vec<f64> = (0..=order).map(|r| dt.powi(r as i32) / factorial(r)).collect();

        // images[i][r] = 𝒜^r x_i, valid up to degree d - 2r
        let images: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|i| {
                let mut seq = vec![vars[i].coeffs.clone()];
                for r in 1..=order {
                    let next = generator(&seq[r - 1], d - 2 * r);
                    seq.push(next);
                }
                seq
            })
            .collect();

        for i in 0..n {
            for (r, img) in images[i].iter().enumerate() {
                out.mean[i] += weights[r] * img[0];
                if with_grad {
                    for (j, g) in space.gradient(img).iter().enumerate() {
                        out.jacobian[(i, j)] += weights[r] * g;
                    }
                }
            }
        }

        for i in 0..n {
            for j in i..n {
                let mut h = space.mul(&vars[i].coeffs, &vars[j].coeffs, d);
                let mut acc = space.zero();
                for r in 1..=order {
                    h = generator(&h, d - 2 * r);
                    for (a, v) in acc.iter_mut().zip(&h).take(1 + q * n) {
                        *a += weights[r] * v;
                    }
                    for s in 0..=r {
                        space.mul_acc(
                            &mut acc,
                            -weights[r] * binomial(r, s),
                            &images[i][s],
                            &images[j][r - s],
                            q,
                        );
                    }
                }
                out.cov[(i, j)] = acc[0];
                out.cov[(j, i)] = acc[0];
                if with_grad {
                    for (m, g) in space.gradient(&acc).iter().enumerate() {
                        out.cov_grad[m][(i, j)] = *g;
                        out.cov_grad[m][(j, i)] = *g;
                    }
                }
            }
        }
        out
    }
}

/// Transition approximation for one step size.
#[derive(Debug, Clone)]
pub struct DiscretizedTransition {
    kernel: Arc<Kernel>,
    dt: f64,
    /// `(Φ, Q)` when the transition is affine in the state (`a(U) = Φ U`, constant `Q`).
    affine: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

pub fn euler_maruyama(model: &DgpModel, dt: f64) -> Result<DiscretizedTransition> {
    DiscretizedTransition::new(model, Scheme::EulerMaruyama, dt)
}

pub fn tme(model: &DgpModel, dt: f64, order: usize) -> Result<DiscretizedTransition> {
    if !(1..=MAX_TME_ORDER).contains(&order) {
        return Err(Error::UnsupportedScheme(format!("TME order {order}")));
    }
    DiscretizedTransition::new(model, Scheme::Tme(order), dt)
}

fn new_kernel(model: &DgpModel, scheme: Scheme) -> Result<Arc<Kernel>> {
    if let Scheme::Tme(o) = scheme {
        if !(1..=MAX_TME_ORDER).contains(&o) {
            return Err(Error::UnsupportedScheme(format!("TME order {o}")));
        }
    }
    if scheme == Scheme::Exact && !model.is_linear() {
        return Err(Error::UnsupportedScheme(
            "exact discretization needs a model without parent links".into(),
        ));
    }
    Ok(Arc::new(Kernel {
        model: model.clone(),
        scheme,
        values: OnceLock::new(),
        gradients: OnceLock::new(),
    }))
}

/// Van Loan: `exp([[-A, LLᵀ], [0, Aᵀ]] dt)` yields `Φ = exp(A dt)` and the exact noise covariance.
fn exact_affine(a: &DMatrix<f64>, qc: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(-a));
    block.view_mut((0, n), (n, n)).copy_from(qc);
    block.view_mut((n, n), (n, n)).copy_from(&a.transpose());
    let e = expm(&(block * dt));
    let phi = e.view((n, n), (n, n)).transpose();
    let q = &phi * e.view((0, n), (n, n));
    (phi, symmetrize(&q))
}

impl DiscretizedTransition {
    pub fn new(model: &DgpModel, scheme: Scheme, dt: f64) -> Result<Self> {
        Self::with_kernel(new_kernel(model, scheme)?, dt)
    }

    fn with_kernel(kernel: Arc<Kernel>, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("step must be positive, got {dt}")));
        }
        let mut tr = Self { kernel, dt, affine: None };
        if tr.kernel.model.is_linear() {
            let n = tr.kernel.model.state_dim();
            let zero = DVector::zeros(n);
            tr.affine = Some(match tr.kernel.scheme {
                Scheme::Exact => {
                    let a = drift_matrix(&tr.kernel.model);
                    let qc = diffusion_matrix(&tr.kernel.model);
                    exact_affine(&a, &qc, dt)
                }
                _ => {
                    let m = tr.kernel.evaluate(&zero, dt, true);
                    (m.jacobian, symmetrize(&m.cov))
                }
            });
        }
        Ok(tr)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn scheme(&self) -> Scheme {
        self.kernel.scheme
    }

    pub fn model(&self) -> &DgpModel {
        &self.kernel.model
    }

    pub fn affine(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        self.affine.as_ref().map(|(p, q)| (p, q))
    }

    /// Raw transition mean and covariance.
    pub fn moments(&self, x: &DVector<f64>) -> Moments {
        if let Some((phi, q)) = &self.affine {
            return Moments { mean: phi * x, cov: q.clone() };
        }
        let m = self.kernel.evaluate(x, self.dt, false);
        Moments { mean: m.mean, cov: m.cov }
    }

    pub fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        self.moments(x).mean
    }

    /// Moments with the covariance symmetrized and floored at `COV_FLOOR_REL * trace`.
    pub fn repaired_moments(&self, x: &DVector<f64>) -> RepairedMoments {
        let m = self.moments(x);
        repair(m.mean, &m.cov)
    }

    /// Moments together with their first derivatives in the state.
    pub fn moments_with_derivatives(&self, x: &DVector<f64>) -> MomentsWithDerivatives {
        if let Some((phi, q)) = &self.affine {
            let n = x.len();
            return MomentsWithDerivatives {
                mean: phi * x,
                cov: q.clone(),
                jacobian: phi.clone(),
                cov_grad: vec![DMatrix::zeros(n, n); n],
            };
        }
        self.kernel.evaluate(x, self.dt, true)
    }
}

/// Symmetrizes and floors a covariance; reports strongly negative eigenvalues.
pub fn repair(mean: DVector<f64>, cov: &DMatrix<f64>) -> RepairedMoments {
    let floored = floor_eigenvalues(cov, COV_FLOOR_REL);
    let trace = floored.matrix.trace().abs();
    let indefinite = (floored.min_eigenvalue < -INDEFINITE_REL * trace).then_some(floored.min_eigenvalue);
    RepairedMoments { mean, cov: floored.matrix, shift: floored.max_shift, indefinite }
}

/// Drift matrix of a model without parent links.
fn drift_matrix(model: &DgpModel) -> DMatrix<f64> {
    let n = model.state_dim();
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        a.set_column(j, &model.joint_drift(&e));
    }
    a
}

fn diffusion_matrix(model: &DgpModel) -> DMatrix<f64> {
    let b = model.joint_dispersion(&DVector::zeros(model.state_dim()));
    &b * b.transpose()
}

fn dt_key(dt: f64) -> i64 {
    (dt * 1e15).round() as i64
}

/// Transitions for every distinct step size of a schedule, keyed by `dt` rounded to 1e-15.
#[derive(Debug, Clone)]
pub struct TransitionSet {
    scheme: Scheme,
    by_step: HashMap<i64, DiscretizedTransition>,
}

impl TransitionSet {
    pub fn new(model: &DgpModel, scheme: Scheme, steps: impl IntoIterator<Item = f64>) -> Result<Self> {
        let kernel = new_kernel(model, scheme)?;
        let mut by_step = HashMap::new();
        for dt in steps {
            let key = dt_key(dt);
            if let std::collections::hash_map::Entry::Vacant(e) = by_step.entry(key) {
                e.insert(DiscretizedTransition::with_kernel(kernel.clone(), dt)?);
            }
        }
        Ok(Self { scheme, by_step })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.by_step.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_step.is_empty()
    }

    pub fn try_get(&self, dt: f64) -> Option<&DiscretizedTransition> {
        self.by_step.get(&dt_key(dt))
    }

    /// # Panics
    /// If `dt` was not part of the schedule the set was built for.
    pub fn get(&self, dt: f64) -> &DiscretizedTransition {
        self.try_get(dt)
            .unwrap_or_else(|| panic!("no transition prepared for step {dt}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_dgp, DgpNode, NodeId, ParamSource, WrappingKind};
    use approx::assert_relative_eq;

    fn lti(alpha: usize, ell: f64, sigma: f64) -> DgpModel {
        build_dgp(vec![DgpNode::new(
            NodeId::new(1, 1),
            alpha,
            ParamSource::fixed(ell),
            ParamSource::fixed(sigma),
        )])
        .unwrap()
    }

    fn dgp2() -> DgpModel {
        build_dgp(vec![
            DgpNode::new(
                NodeId::new(1, 1),
                1,
                ParamSource::parent(NodeId::new(2, 1), WrappingKind::Exp),
                ParamSource::parent(NodeId::new(2, 2), WrappingKind::Exp),
            ),
            DgpNode::new(NodeId::new(2, 1), 0, ParamSource::fixed(0.8), ParamSource::fixed(0.7)),
            DgpNode::new(NodeId::new(2, 2), 0, ParamSource::fixed(1.2), ParamSource::fixed(0.5)),
        ])
        .unwrap()
    }

    #[test]
    fn scheme_names() {
        assert_eq!("em".parse::<Scheme>().unwrap(), Scheme::EulerMaruyama);
        assert_eq!("tme-3".parse::<Scheme>().unwrap(), Scheme::Tme(3));
        assert_eq!("exact".parse::<Scheme>().unwrap(), Scheme::Exact);
        assert!("tme-4".parse::<Scheme>().is_err());
        assert_eq!(Scheme::Tme(2).to_string(), "tme-2");
    }

    #[test]
    fn euler_scalar() {
        let m = lti(0, 1.0, 1.0);
        let tr = euler_maruyama(&m, 0.1).unwrap();
        let mo = tr.moments(&DVector::from_element(1, 2.0));
        assert_relative_eq!(mo.mean[0], 1.8, epsilon = 1e-15);
        assert_relative_eq!(mo.cov[(0, 0)], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn euler_smooth_node_is_singular() {
        let tr = euler_maruyama(&lti(1, 1.0, 1.0), 0.1).unwrap();
        let q = tr.moments(&DVector::zeros(2)).cov;
        assert_eq!(q[(0, 0)], 0.0);
        assert_eq!(q.determinant(), 0.0);
        assert!(q[(1, 1)] > 0.0);
    }

    #[test]
    fn tme_mean_is_truncated_exponential() {
        let m = lti(1, 0.6, 1.1);
        let a = drift_matrix(&m);
        for order in 1..=3 {
            let tr = tme(&m, 0.1, order).unwrap();
            let (phi, _) = tr.affine().unwrap();
            let mut expected = DMatrix::identity(2, 2);
            let mut term = DMatrix::identity(2, 2);
            for r in 1..=order {
                term = &term * &a * (0.1 / r as f64);
                expected += &term;
            }
            assert!((phi - expected).norm() < 1e-13);
        }
    }

    #[test]
    fn tme_linear_cov_is_state_independent() {
        let m = lti(1, 0.6, 1.1);
        let tr = tme(&m, 0.05, 3).unwrap();
        let q0 = tr.kernel.evaluate(&DVector::zeros(2), 0.05, false).cov;
        let q1 = tr.kernel.evaluate(&DVector::from_vec(vec![1.3, -2.0]), 0.05, false).cov;
        assert!((q0 - q1).norm() < 1e-12);
    }

    #[test]
    fn tme_one_equals_euler_on_nonlinear_model() {
        let m = dgp2();
        let x = DVector::from_vec(vec![0.3, -0.2, 0.4, -0.1]);
        let em = euler_maruyama(&m, 0.01).unwrap().moments_with_derivatives(&x);
        let t1 = tme(&m, 0.01, 1).unwrap().moments_with_derivatives(&x);
        assert!((&em.mean - &t1.mean).norm() < 1e-14);
        assert!((&em.cov - &t1.cov).norm() < 1e-14);
        assert!((&em.jacobian - &t1.jacobian).norm() < 1e-13);
    }

    #[test]
    fn zero_drift_constant_dispersion() {
        // α=0 node with huge lengthscale has near-zero drift; the covariance terms beyond
        // first order scale with the drift, so Q → LLᵀ dt
        let m = lti(0, 1e12, 1.0);
        let tr = tme(&m, 0.5, 3).unwrap();
        let mo = tr.moments(&DVector::from_element(1, 1.0));
        let b2 = 2.0 / 1e12;
        assert_relative_eq!(mo.mean[0], 1.0, epsilon = 1e-11);
        assert_relative_eq!(mo.cov[(0, 0)], b2 * 0.5, max_relative = 1e-9);
    }

    #[test]
    fn exact_matches_closed_form() {
        let m = lti(0, 0.5, 2.0);
        let tr = DiscretizedTransition::new(&m, Scheme::Exact, 0.3).unwrap();
        let (phi, q) = tr.affine().unwrap();
        let e = (-0.3f64 / 0.5).exp();
        assert_relative_eq!(phi[(0, 0)], e, max_relative = 1e-14);
        assert_relative_eq!(q[(0, 0)], 4.0 * (1.0 - e * e), max_relative = 1e-12);
        assert!(DiscretizedTransition::new(&dgp2(), Scheme::Exact, 0.1).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let m = dgp2();
        let tr = tme(&m, 0.05, 3).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.2, 0.4, -0.1]);
        let md = tr.moments_with_derivatives(&x);
        let plain = tr.moments(&x);
        assert!((&plain.mean - &md.mean).norm() < 1e-14);
        assert!((&plain.cov - &md.cov).norm() < 1e-14);
        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let (mp, mm) = (tr.moments(&xp), tr.moments(&xm));
            let dmean = (&mp.mean - &mm.mean) / (2.0 * h);
            let dcov = (&mp.cov - &mm.cov) / (2.0 * h);
            assert!((dmean - md.jacobian.column(j)).norm() < 1e-7);
            assert!((dcov - &md.cov_grad[j]).norm() < 1e-7 * (1.0 + md.cov_grad[j].norm()));
        }
    }

    #[test]
    fn repair_flags_indefinite() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        let r = repair(DVector::zeros(2), &cov);
        assert!(r.indefinite.is_some());
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-13]);
        let r = repair(DVector::zeros(2), &cov);
        assert!(r.indefinite.is_none());
        assert!(r.shift <= 1e-9 * 1.0);
    }

    #[test]
    fn transition_set_caches_by_step() {
        let m = dgp2();
        let set = TransitionSet::new(&m, Scheme::Tme(2), [0.1, 0.1, 0.2, 0.1 + 1e-17]).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.get(0.2).dt(), 0.2);
        assert!(set.try_get(0.3).is_none());
    }
}
