//! Posterior cross-covariance decay for a two-layer linear system.
//!
//! The system is
//!
//! ```text
//! df = mu f dt + u dW_f
//! du = a u dt + b dW_u
//! ```
//!
//! with `mu < 0`, `a < 0`, `b > 0`. A Gaussian filter that observes only `f` shrinks
//! `cov[f, u]` by `R / (var f + R)` at every update, so the cross-covariance vanishes
//! and the magnitude layer stops learning from data.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovRecursionConfig {
    pub mu: f64,
    pub a: f64,
    pub b: f64,
    pub dt: f64,
    /// Measurement noise variance per step. Shorter than `steps` repeats the last entry.
    pub noise_schedule: Vec<f64>,
    pub steps: usize,
    /// Initial `cov[f, u]`.
    pub p0_fs: f64,
    /// Initial `var f`. Defaults to the stationary value.
    pub p0_ff: Option<f64>,
    /// Initial `E[u^2]`. Defaults to the stationary value.
    pub e0: Option<f64>,
}

impl CovRecursionConfig {
    pub fn new(mu: f64, a: f64, b: f64, dt: f64, noise_var: f64, steps: usize, p0_fs: f64) -> Self {
        Self { mu, a, b, dt, noise_schedule: vec![noise_var], steps, p0_fs, p0_ff: None, e0: None }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if !(self.mu < 0.0) || !self.mu.is_finite() {
            return bad("mu must be negative");
        }
        if !(self.a < 0.0) || !self.a.is_finite() {
            return bad("a must be negative");
        }
        if !(self.b > 0.0) || !self.b.is_finite() {
            return bad("b must be positive");
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad("dt must be positive");
        }
        if self.noise_schedule.is_empty() {
            return bad("noise schedule is empty");
        }
        if self.noise_schedule.iter().any(|r| !(*r >= 0.0)) {
            return bad("noise variances must be non-negative");
        }
        if !self.p0_fs.is_finite() {
            return bad("initial cross-covariance must be finite");
        }
        if let Some(p) = self.p0_ff {
            if !(p > 0.0) || !p.is_finite() {
                return bad("initial variance of f must be positive");
            }
        }
        if let Some(e) = self.e0 {
            if !(e > 0.0) || !e.is_finite() {
                return bad("initial second moment of u must be positive");
            }
        }
        Ok(())
    }

    /// Stationary `E[u^2] = b^2 / (-2a)`.
    pub fn stationary_e_usq(&self) -> f64 {
        -self.b * self.b / (2.0 * self.a)
    }

    pub fn initial_e_usq(&self) -> f64 {
        self.e0.unwrap_or_else(|| self.stationary_e_usq())
    }

    pub fn initial_p_ff(&self) -> f64 {
        self.p0_ff.unwrap_or_else(|| self.stationary_e_usq() / (-2.0 * self.mu))
    }

    pub fn noise_at(&self, k: usize) -> f64 {
        let idx = k.saturating_sub(1).min(self.noise_schedule.len() - 1);
        self.noise_schedule[idx]
    }
}

/// `(e^z - 1) / z`, continuous at zero.
fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 + 0.5 * z
    } else {
        z.exp_m1() / z
    }
}

/// Predicted moments after one step of length `dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedMoments {
    pub p_fs: f64,
    pub p_ff: f64,
    pub e_usq: f64,
}

/// Propagates `cov[f,u]`, `var f` and `E[u^2]` exactly over `dt`.
pub fn predict_moments(config: &CovRecursionConfig, p_fs: f64, p_ff: f64, e_usq: f64, dt: f64) -> PredictedMoments {
    let (mu, a) = (config.mu, config.a);
    let e_inf = config.stationary_e_usq();
    let decay = (2.0 * mu * dt).exp();
    // dP/dt = 2 mu P + E(t),  E(t) = e_inf + (e_usq - e_inf) exp(2 a t)
    let p_ff_next = decay * p_ff
        + e_inf * dt * phi1(2.0 * mu * dt)
        + (e_usq - e_inf) * decay * dt * phi1(2.0 * (a - mu) * dt);
    PredictedMoments {
        p_fs: p_fs * ((mu + a) * dt).exp(),
        p_ff: p_ff_next,
        e_usq: e_inf + (e_usq - e_inf) * (2.0 * a * dt).exp(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecursionStep {
    pub k: usize,
    pub pred_ff: f64,
    pub pred_fs: f64,
    pub post_fs: f64,
    pub post_ff: f64,
    pub shrink: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecursionOutput {
    pub p0_fs: f64,
    pub steps: Vec<RecursionStep>,
}

/// Alternates exact prediction and the scalar Gaussian update of `cov[f,u]`.
///
/// `E[u^2]` follows the prior moment equation since it is the unconditional second
/// moment of the magnitude process.
pub fn gf_covariance_recursion(config: &CovRecursionConfig) -> Result<RecursionOutput> {
    config.validate()?;
    let mut p_fs = config.p0_fs;
    let mut p_ff = config.initial_p_ff();
    let mut e_usq = config.initial_e_usq();
    let mut steps = Vec::with_capacity(config.steps);
    for k in 1..=config.steps {
        let pred = predict_moments(config, p_fs, p_ff, e_usq, config.dt);
        let r = config.noise_at(k);
        let shrink = if r == 0.0 { 0.0 } else { r / (pred.p_ff + r) };
        p_fs = pred.p_fs * shrink;
        p_ff = pred.p_ff * shrink;
        e_usq = pred.e_usq;
        steps.push(RecursionStep { k, pred_ff: pred.p_ff, pred_fs: pred.p_fs, post_fs: p_fs, post_ff: p_ff, shrink });
    }
    Ok(RecursionOutput { p0_fs: config.p0_fs, steps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBound {
    /// `|P0_fs| * prod_{i<=k} M_i` for each step.
    pub bound: Vec<f64>,
    /// Whether `|P_fs,k| <= bound_k` at every step.
    pub holds: bool,
}

pub fn covariance_bound(output: &RecursionOutput) -> CovarianceBound {
    let mut acc = output.p0_fs.abs();
    let mut holds = true;
    let bound = output
        .steps
        .iter()
        .map(|s| {
            acc *= s.shrink;
            // relative slack for rounding in the product
            if s.post_fs.abs() > acc * (1.0 + 1e-12) {
                holds = false;
            }
            acc
        })
        .collect();
    CovarianceBound { bound, holds }
}

/// Positive lower bound on the predicted variance of `f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceFloor {
    /// Upper bound on `E[(mu f)^2]`.
    pub c: f64,
    /// Lower bound on `E[u^2]`.
    pub c_theta: f64,
    pub epsilon: f64,
    pub zeta: f64,
    pub floor: f64,
}

/// Lower bound on `var f` after any prediction of length `dt`.
///
/// `epsilon` defaults to half of the admissible maximum. `zeta = 1 / (4 epsilon)` is
/// the smallest slope with `sqrt(P) <= epsilon + zeta P` for all `P >= 0`.
pub fn variance_floor(config: &CovRecursionConfig, epsilon: Option<f64>) -> Result<VarianceFloor> {
    config.validate()?;
    let e0 = config.initial_e_usq();
    let e_inf = config.stationary_e_usq();
    let max_var = config.initial_p_ff().max(e0.max(e_inf) / (-2.0 * config.mu));
    let c = config.mu * config.mu * max_var;
    let c_theta = e0.min(e_inf);
    let limit = c_theta / (2.0 * c.sqrt());
    let epsilon = epsilon.unwrap_or(0.5 * limit);
    if !(epsilon > 0.0) || epsilon >= limit {
        return Err(Error::InvalidParameter(format!(
            "epsilon must lie in (0, {limit:e}), got {epsilon:e}"
        )));
    }
    let zeta = 1.0 / (4.0 * epsilon);
    let floor = (c_theta - 2.0 * epsilon * c.sqrt()) * config.dt / (2.0 * zeta * config.dt * c.sqrt()).exp();
    Ok(VarianceFloor { c, c_theta, epsilon, zeta, floor })
}

/// Writes `k,pred_ff,pred_fs,post_fs,shrink,bound` rows.
pub fn write_recursion_csv<W: Write>(output: &RecursionOutput, bound: &CovarianceBound, mut out: W) -> std::io::Result<()> {
    writeln!(out, "k,pred_ff,pred_fs,post_fs,shrink,bound")?;
    writeln!(out, "0,,,{:.16e},,{:.16e}", output.p0_fs, output.p0_fs.abs())?;
    for (s, b) in output.steps.iter().zip(&bound.bound) {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            s.k, s.pred_ff, s.pred_fs, s.post_fs, s.shrink, b
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn example() -> CovRecursionConfig {
        CovRecursionConfig::new(-1.0, -1.0, 1.0, 0.1, 0.1, 200, 0.1)
    }

    #[test]
    fn cross_covariance_prediction() {
        let cfg = example();
        let p = predict_moments(&cfg, 0.0, 0.3, 0.5, 0.7);
        assert_eq!(p.p_fs, 0.0);
        let p = predict_moments(&cfg, 0.8, 0.3, 0.5, std::f64::consts::LN_2);
        assert!((p.p_fs - 0.2).abs() < 1e-15);
    }

    #[test]
    fn stationary_start_stays_stationary() {
        let cfg = example();
        let (p, e) = (cfg.initial_p_ff(), cfg.initial_e_usq());
        assert_eq!(p, 0.25);
        let next = predict_moments(&cfg, 0.0, p, e, 0.37);
        assert!((next.p_ff - 0.25).abs() < 1e-15);
        assert!((next.e_usq - 0.5).abs() < 1e-15);
    }

    #[test]
    fn variance_prediction_matches_fine_ode_integration() {
        // also covers a == mu, where the closed form needs the limit
        for (mu, a) in [(-1.0, -1.0), (-0.5, -2.0), (-3.0, -0.2)] {
            let cfg = CovRecursionConfig::new(mu, a, 0.8, 0.1, 0.1, 1, 0.0);
            let (p0, e0, dt) = (0.05, 1.7, 0.9);
            let exact = predict_moments(&cfg, 0.0, p0, e0, dt);
            // RK4 on (P, E)
            let f = |p: f64, e: f64| (2.0 * mu * p + e, 2.0 * a * e + 0.64);
            let n = 20_000;
            let h = dt / n as f64;
            let (mut p, mut e) = (p0, e0);
            for _ in 0..n {
                let k1 = f(p, e);
                let k2 = f(p + 0.5 * h * k1.0, e + 0.5 * h * k1.1);
                let k3 = f(p + 0.5 * h * k2.0, e + 0.5 * h * k2.1);
                let k4 = f(p + h * k3.0, e + h * k3.1);
                p += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
                e += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
            }
            assert!((exact.p_ff - p).abs() < 1e-12, "{mu} {a}: {} vs {p}", exact.p_ff);
            assert!((exact.e_usq - e).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_prediction_matches_monte_carlo() {
        let cfg = CovRecursionConfig::new(-1.0, -1.5, 1.0, 0.1, 0.1, 1, 0.0);
        let (p0, e0, c0) = (0.2, 0.6, 0.15);
        let horizon = 0.5;
        let pred = predict_moments(&cfg, c0, p0, e0, horizon);
        let paths = 100_000;
        let sub = 1000;
        let h = horizon / sub as f64;
        let sh = h.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut f2 = Vec::with_capacity(paths);
        let mut fu = Vec::with_capacity(paths);
        // correlated Gaussian start with var f = p0, var u = e0, cov = c0
        let l21 = c0 / p0.sqrt();
        let l22 = (e0 - l21 * l21).sqrt();
        for _ in 0..paths {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let mut f = p0.sqrt() * z1;
            let mut u = l21 * z1 + l22 * z2;
            for _ in 0..sub {
                let w1: f64 = StandardNormal.sample(&mut rng);
                let w2: f64 = StandardNormal.sample(&mut rng);
                let fnext = f + cfg.mu * f * h + u * sh * w1;
                u += cfg.a * u * h + cfg.b * sh * w2;
                f = fnext;
            }
            f2.push(f * f);
            fu.push(f * u);
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (m, (var / v.len() as f64).sqrt())
        };
        let (m, se) = stats(&f2);
        assert!((m - pred.p_ff).abs() < 3.0 * se, "var f: mc {m} +- {se}, exact {}", pred.p_ff);
        let (m, se) = stats(&fu);
        assert!((m - pred.p_fs).abs() < 3.0 * se, "cov: mc {m} +- {se}, exact {}", pred.p_fs);
    }

    #[test]
    fn recursion_vanishes_and_respects_bound() {
        let out = gf_covariance_recursion(&example()).unwrap();
        let b = covariance_bound(&out);
        assert!(b.holds);
        let mut prev = out.p0_fs.abs();
        for s in &out.steps {
            assert!(s.post_fs.abs() < prev);
            prev = s.post_fs.abs();
        }
        let crossing = out.steps.iter().position(|s| s.post_fs.abs() < 1e-4).expect("never below 1e-4");
        assert!(crossing < 200);
        // single step: one application of the update with a shrinking prediction
        assert!(out.steps[0].post_fs.abs() <= out.p0_fs.abs() * out.steps[0].shrink + 1e-18);
    }

    #[test]
    fn perfect_measurement_zeroes_cross_covariance() {
        let mut cfg = example();
        cfg.noise_schedule = (1..=200).map(|k| if k == 5 { 0.0 } else { 0.1 }).collect();
        let out = gf_covariance_recursion(&cfg).unwrap();
        assert!(out.steps[3].post_fs != 0.0);
        assert!(out.steps[4..].iter().all(|s| s.post_fs == 0.0));
    }

    #[test]
    fn zero_initial_cross_covariance() {
        let mut cfg = example();
        cfg.p0_fs = 0.0;
        let out = gf_covariance_recursion(&cfg).unwrap();
        assert!(out.steps.iter().all(|s| s.post_fs == 0.0 && s.pred_fs == 0.0));
    }

    #[test]
    fn prior_only_decay() {
        // R = infinity equivalent: shrink factor 1
        let mut cfg = example();
        cfg.noise_schedule = vec![f64::MAX];
        let out = gf_covariance_recursion(&cfg).unwrap();
        assert!(out.steps.last().unwrap().post_fs.abs() < 1e-15);
    }

    #[test]
    fn floor_below_observed_variance() {
        let cfg = example();
        let out = gf_covariance_recursion(&cfg).unwrap();
        let floor = variance_floor(&cfg, None).unwrap();
        let min_pred = out.steps.iter().map(|s| s.pred_ff).fold(f64::INFINITY, f64::min);
        assert!(floor.floor > 0.0 && floor.floor <= min_pred, "{} vs {min_pred}", floor.floor);
        // geometric decay of the bound
        let r = cfg.noise_at(1);
        let rate = r / (floor.floor + r);
        let bound = covariance_bound(&out);
        for (k, b) in bound.bound.iter().enumerate() {
            assert!(*b <= cfg.p0_fs * rate.powi(k as i32 + 1) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn floor_rejects_large_epsilon_and_vanishes_with_dt() {
        let cfg = example();
        let f = variance_floor(&cfg, None).unwrap();
        let limit = f.c_theta / (2.0 * f.c.sqrt());
        assert!(variance_floor(&cfg, Some(limit)).is_err());
        assert!(variance_floor(&cfg, Some(2.0 * limit)).is_err());
        let mut tiny = cfg.clone();
        tiny.dt = 1e-12;
        assert!(variance_floor(&tiny, None).unwrap().floor < 1e-11);
    }

    #[test]
    fn csv_layout() {
        let cfg = CovRecursionConfig::new(-1.0, -1.0, 1.0, 0.1, 0.1, 2, 0.1);
        let out = gf_covariance_recursion(&cfg).unwrap();
        let mut buf = Vec::new();
        write_recursion_csv(&out, &covariance_bound(&out), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "k,pred_ff,pred_fs,post_fs,shrink,bound");
        assert!(lines[2].starts_with("1,"));
        assert_eq!(lines[2].split(',').count(), 6);
    }

    #[test]
    fn invalid_config() {
        let mut cfg = example();
        cfg.mu = 0.5;
        assert!(gf_covariance_recursion(&cfg).is_err());
        let mut cfg = example();
        cfg.noise_schedule.clear();
        assert!(cfg.validate().is_err());
    }
}
