//! Gram-matrix formulation: non-stationary exponential covariance, Gram assembly with
//! jitter, closed-form GP regression and type-II maximum likelihood for stationary Matérn GPs.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::{factorial, log_det_from_cholesky};
use crate::matern::{matern_covariance, MaternSpec};
use crate::optim::{minimize, LbfgsOptions, OptimResult};

/// Relative jitter added to every Gram matrix, as a fraction of the mean diagonal.
pub const JITTER_REL: f64 = 1e-8;
/// Largest relative jitter tried before giving up.
pub const MAX_JITTER_REL: f64 = 1e-4;

/// `2 / sqrt(π)`: the `sqrt(2) / (Γ(1/2) 2^(-1/2))` prefactor of the exponential member.
fn ns_prefactor() -> f64 {
    2.0 / std::f64::consts::PI.sqrt()
}

/// Non-stationary exponential covariance with input-dependent lengthscale and magnitude.
pub fn ns_matern_covariance(t: f64, t2: f64, ell_t: f64, ell_t2: f64, sigma_t: f64, sigma_t2: f64) -> f64 {
    let s = ell_t + ell_t2;
    ns_prefactor()
        * sigma_t
        * sigma_t2
        * (ell_t * ell_t2).powf(0.25)
        * (-(2f64.sqrt()) * (t - t2).abs() / s.sqrt()).exp()
        / s.sqrt()
}

/// `∂ log C(t, t2) / ∂ℓ(t)` for `t ≠ t2` (the diagonal does not depend on ℓ).
pub(crate) fn ns_dlog_dell(t: f64, t2: f64, ell_t: f64, ell_t2: f64) -> f64 {
    let s = ell_t + ell_t2;
    0.25 / ell_t - 0.5 / s + (t - t2).abs() / (2f64.sqrt() * s.powf(1.5))
}

/// A factorized Gram matrix together with the jitter that made it PD.
#[derive(Debug, Clone)]
pub struct Gram {
    pub matrix: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Gram {
    pub fn log_det(&self) -> f64 {
        log_det_from_cholesky(&self.chol)
    }

    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Adds `JITTER_REL * mean diagonal` to the diagonal, escalating by ×10 up to
/// `MAX_JITTER_REL` until the Cholesky factorization succeeds.
pub fn factor_with_jitter(matrix: DMatrix<f64>) -> Result<Gram> {
    let n = matrix.nrows();
    if n == 0 {
        let chol = Cholesky::new(matrix.clone()).expect("empty matrix");
        return Ok(Gram { matrix, chol, jitter: 0.0 });
    }
    let mean_diag = (matrix.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = JITTER_REL;
    while rel <= MAX_JITTER_REL * (1.0 + 1e-9) {
        let jitter = rel * mean_diag;
        let mut m = matrix.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m.clone()) {
            return Ok(Gram { matrix: m, chol, jitter });
        }
        rel *= 10.0;
    }
    Err(Error::NotPositiveDefinite(format!("{n}×{n} Gram matrix")))
}

/// Evaluates `cov(i, j)` on all pairs (symmetric) and factorizes with jitter.
pub fn build_gram(n: usize, cov: impl Fn(usize, usize) -> f64) -> Result<Gram> {
    factor_with_jitter(gram_matrix(n, cov))
}

pub fn gram_matrix(n: usize, cov: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = cov(i, j);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

pub fn stationary_gram(spec: &MaternSpec, times: &[f64]) -> DMatrix<f64> {
    gram_matrix(times.len(), |i, j| matern_covariance(spec, times[i], times[j]))
}

pub fn cross_gram(spec: &MaternSpec, query: &[f64], times: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(query.len(), times.len(), |i, j| matern_covariance(spec, query[i], times[j]))
}

#[derive(Debug, Clone)]
pub struct GpPosterior {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

/// Conditional Gaussian mean and variance at query points given noisy observations.
///
/// `gram` is the data covariance (without noise), `cross` is query × data.
pub fn gp_regress(
    gram: &DMatrix<f64>,
    noise_var: &[f64],
    y: &[f64],
    cross: &DMatrix<f64>,
    prior_var: &[f64],
) -> Result<GpPosterior> {
    let n = gram.nrows();
    let mut k = gram.clone();
    for i in 0..n {
        k[(i, i)] += noise_var[i];
    }
    let chol = Cholesky::new(k).ok_or_else(|| Error::NotPositiveDefinite("K + R".into()))?;
    let alpha = chol.solve(&DVector::from_column_slice(y));
    let mean = cross * &alpha;
    let v = chol.l().solve_lower_triangular(&cross.transpose()).expect("triangular solve");
    let var = DVector::from_fn(cross.nrows(), |i, _| (prior_var[i] - v.column(i).norm_squared()).max(0.0));
    Ok(GpPosterior { mean, var })
}

/// Negative log marginal likelihood `½ yᵀK⁻¹y + ½ log|2πK|` of `K = gram + diag(R)`.
pub fn negative_log_marginal(gram: &DMatrix<f64>, noise_var: &[f64], y: &[f64]) -> Result<f64> {
    let n = gram.nrows();
    let mut k = gram.clone();
    for i in 0..n {
        k[(i, i)] += noise_var[i];
    }
    let chol = Cholesky::new(k).ok_or_else(|| Error::NotPositiveDefinite("K + R".into()))?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    Ok(0.5 * (yv.dot(&alpha) + log_det_from_cholesky(&chol) + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// `dk/dr` of the half-integer Matérn correlation at scaled lag `r = κ|τ|`, per unit σ².
fn matern_dr(alpha: usize, r: f64) -> f64 {
    let p = alpha;
    let lead = factorial(p) / factorial(2 * p);
    let mut poly = 0.0;
    let mut dpoly = 0.0;
    for i in 0..=p {
        let c = factorial(p + i) / (factorial(i) * factorial(p - i));
        let e = (p - i) as i32;
        poly += c * (2.0 * r).powi(e);
        if e > 0 {
            dpoly += c * 2.0 * e as f64 * (2.0 * r).powi(e - 1);
        }
    }
    lead * (-r).exp() * (dpoly - poly)
}

#[derive(Debug, Clone)]
pub struct GpMleFit {
    pub spec: MaternSpec,
    pub neg_log_marginal: f64,
    pub optim: OptimResult,
}

/// Fits `log ℓ` and `log σ` of a stationary Matérn GP by L-BFGS on the marginal likelihood,
/// with known noise variances. Several lengthscale starts are tried; the best is kept.
pub fn fit_gp_mle(alpha: usize, times: &[f64], y: &[f64], noise_var: &[f64], opts: &LbfgsOptions) -> Result<GpMleFit> {
    let n = times.len();
    if n == 0 {
        return Err(Error::InvalidData("no data to fit".into()));
    }
    let span = (times[n - 1] - times[0]).max(1e-12);
    let yvar = y.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let sigma0 = yvar.sqrt().max(1e-3);
    let yv = DVector::from_column_slice(y);

    let objective = |theta: &DVector<f64>| -> Option<(f64, DVector<f64>)> {
        let (ell, sigma) = (theta[0].clamp(-30.0, 30.0).exp(), theta[1].clamp(-30.0, 30.0).exp());
        let spec = MaternSpec { smoothness_alpha: alpha, lengthscale: ell, magnitude: sigma };
        let kappa = spec.kappa();
        let mut k = DMatrix::zeros(n, n);
        let mut dk_dlogell = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let c = matern_covariance(&spec, times[i], times[j]);
                let r = kappa * (times[i] - times[j]).abs();
                // r ∝ 1/ℓ ⇒ dr/dlog ℓ = -r
                let d = -r * sigma * sigma * matern_dr(alpha, r);
                k[(i, j)] = c;
                k[(j, i)] = c;
                dk_dlogell[(i, j)] = d;
                dk_dlogell[(j, i)] = d;
            }
        }
        let signal = k.clone();
        for i in 0..n {
            k[(i, i)] += noise_var[i];
        }
        let chol = Cholesky::new(k)?;
        let a = chol.solve(&yv);
        let loss = 0.5 * (yv.dot(&a) + log_det_from_cholesky(&chol) + n as f64 * (2.0 * std::f64::consts::PI).ln());
        let w = chol.inverse() - &a * a.transpose();
        let g_ell = 0.5 * w.component_mul(&dk_dlogell).sum();
        let g_sigma = 0.5 * w.component_mul(&(signal * 2.0)).sum();
        Some((loss, DVector::from_vec(vec![g_ell, g_sigma])))
    };

    let mut best: Option<GpMleFit> = None;
    for frac in [0.01, 0.1, 1.0] {
        let x0 = DVector::from_vec(vec![(frac * span).ln(), sigma0.ln()]);
        let res = minimize(objective, x0, opts);
        if !res.loss.is_finite() {
            continue;
        }
        let spec = MaternSpec::new(alpha, res.x[0].exp(), res.x[1].exp())?;
        if best.as_ref().is_none_or(|b| res.loss < b.neg_log_marginal) {
            best = Some(GpMleFit { spec, neg_log_marginal: res.loss, optim: res });
        }
    }
    best.ok_or_else(|| Error::NotPositiveDefinite("marginal likelihood undefined at every start".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ns_zero_lag_literal_value() {
        let (ell, sigma) = (0.7, 1.3);
        let v = ns_matern_covariance(0.2, 0.2, ell, ell, sigma, sigma);
        let gamma_half = std::f64::consts::PI.sqrt();
        let expected = sigma * sigma * (2f64.sqrt() / (gamma_half * 2f64.powf(-0.5))) * ell.sqrt() * (2.0 * ell).powf(-0.5);
        assert_relative_eq!(v, expected, max_relative = 1e-14);
        assert_relative_eq!(v, sigma * sigma * 2f64.sqrt() / gamma_half, max_relative = 1e-14);
    }

    #[test]
    fn ns_stationary_ratio() {
        let (ell, sigma) = (0.3, 2.0);
        let c0 = ns_matern_covariance(0.0, 0.0, ell, ell, sigma, sigma);
        for k in 0..50 {
            let tau = k as f64 * 0.05;
            let ratio = ns_matern_covariance(1.0, 1.0 + tau, ell, ell, sigma, sigma) / (-tau / ell.sqrt()).exp();
            assert_relative_eq!(ratio, c0, max_relative = 1e-10);
        }
    }

    #[test]
    fn ns_symmetric() {
        let a = ns_matern_covariance(0.1, 0.9, 0.4, 1.7, 0.3, 2.2);
        let b = ns_matern_covariance(0.9, 0.1, 1.7, 0.4, 2.2, 0.3);
        assert_eq!(a, b);
    }

    #[test]
    fn ns_log_derivative() {
        let (t, t2, l1, l2) = (0.1, 0.6, 0.4, 0.9);
        let h = 1e-6;
        let fd = (ns_matern_covariance(t, t2, l1 + h, l2, 1.0, 1.0).ln() - ns_matern_covariance(t, t2, l1 - h, l2, 1.0, 1.0).ln()) / (2.0 * h);
        assert_relative_eq!(ns_dlog_dell(t, t2, l1, l2), fd, max_relative = 1e-8);
    }

    #[test]
    fn gram_jitter_and_single() {
        let g = build_gram(1, |_, _| 2.5).unwrap();
        assert_relative_eq!(g.matrix[(0, 0)], 2.5 * (1.0 + JITTER_REL));
        // rank-one matrix needs jitter to factor
        let g = build_gram(3, |_, _| 1.0).unwrap();
        assert!(g.jitter > 0.0);
        assert!(factor_with_jitter(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
    }

    #[test]
    fn regression_edge_cases() {
        let spec = MaternSpec::new(1, 0.5, 1.0).unwrap();
        let times = [0.0, 0.3, 0.7];
        let k = stationary_gram(&spec, &times);
        let post = gp_regress(&k, &[0.1; 3], &[0.0; 3], &k, &[1.0; 3]).unwrap();
        assert!(post.mean.iter().all(|m| *m == 0.0));
        let k1 = stationary_gram(&spec, &[0.2]);
        let post = gp_regress(&k1, &[0.0], &[0.8], &k1, &[1.0]).unwrap();
        assert_relative_eq!(post.mean[0], 0.8, epsilon = 1e-14);
        assert!(post.var[0].abs() < 1e-14);
    }

    #[test]
    fn matern_derivative_in_r() {
        for alpha in 0..3 {
            let spec = |r: f64| {
                // covariance at scaled lag r for unit magnitude
                let s = MaternSpec::new(alpha, 1.0, 1.0).unwrap();
                matern_covariance(&s, 0.0, r / s.kappa())
            };
            let r = 0.7;
            let fd = (spec(r + 1e-6) - spec(r - 1e-6)) / 2e-6;
            assert_relative_eq!(matern_dr(alpha, r), fd, max_relative = 1e-7);
        }
    }

    #[test]
    fn mle_recovers_reasonable_lengthscale() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let spec = MaternSpec::new(1, 0.2, 1.0).unwrap();
        let times: Vec<f64> = (0..120).map(|i| i as f64 / 119.0 * 3.0).collect();
        let k = stationary_gram(&spec, &times);
        let l = Cholesky::new(k + DMatrix::identity(120, 120) * 1e-10).unwrap().l();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let z = DVector::from_fn(120, |_, _| StandardNormal.sample(&mut rng));
        let f = l * z;
        let noise: Vec<f64> = (0..120).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 0.1 * z }).collect();
        let y: Vec<f64> = f.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let fit = fit_gp_mle(1, &times, &y, &[0.01; 120], &LbfgsOptions::default()).unwrap();
        assert!(fit.spec.lengthscale > 0.05 && fit.spec.lengthscale < 0.8, "{:?}", fit.spec);
        assert!(fit.optim.grad_norm < 1e-4);
    }
}
