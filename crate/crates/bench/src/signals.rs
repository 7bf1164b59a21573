//! Synthetic test signals and error metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use ssdgp::TimeSeriesData;

use crate::error::{BenchError, Result};

/// Piecewise-constant wave with jumps of different heights on `[0, 1]`.
pub fn rectangle_truth(t: f64) -> f64 {
    let sixth = 1.0 / 6.0;
    if (sixth..2.0 * sixth).contains(&t) {
        1.0
    } else if (3.0 * sixth..4.0 * sixth).contains(&t) {
        0.6
    } else if t >= 5.0 * sixth {
        0.4
    } else {
        0.0
    }
}

/// Chirp-like sinusoid with varying magnitude on `[0, 1]`.
pub fn sinusoid_truth(t: f64) -> f64 {
    use std::f64::consts::PI;
    let s = (7.0 * PI * (2.0 * PI * t * t).cos() * t).sin();
    s * s / ((5.0 * PI * t).cos() + 2.0)
}

fn evenly_spaced(n: usize) -> Vec<f64> {
    match n {
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

fn noisy(truth_fn: fn(f64) -> f64, n: usize, noise_var: f64, seed: u64) -> Result<TimeSeriesData> {
    if n == 0 {
        return Err(BenchError::Config("signal needs at least one sample".into()));
    }
    let normal = Normal::new(0.0, noise_var.sqrt())
        .map_err(|_| BenchError::Config(format!("invalid noise variance {noise_var}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times = evenly_spaced(n);
    let truth: Vec<f64> = times.iter().map(|&t| truth_fn(t)).collect();
    let y = truth.iter().map(|f| f + normal.sample(&mut rng)).collect();
    Ok(TimeSeriesData::new(times, y, vec![noise_var; n], Some(truth))?)
}

/// `n` evenly spaced noisy samples of [`rectangle_truth`].
pub fn gen_rectangle(n: usize, noise_var: f64, seed: u64) -> Result<TimeSeriesData> {
    noisy(rectangle_truth, n, noise_var, seed)
}

/// `n` evenly spaced noisy samples of [`sinusoid_truth`].
pub fn gen_sinusoid(n: usize, noise_var: f64, seed: u64) -> Result<TimeSeriesData> {
    noisy(sinusoid_truth, n, noise_var, seed)
}

pub fn rmse(truth: &[f64], estimate: &[f64]) -> f64 {
    assert_eq!(truth.len(), estimate.len(), "rmse on vectors of different length");
    let sse: f64 = truth.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum();
    (sse / truth.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangle_levels() {
        assert_eq!(rectangle_truth(0.0), 0.0);
        assert_eq!(rectangle_truth(0.25), 1.0);
        assert_eq!(rectangle_truth(0.4), 0.0);
        assert_eq!(rectangle_truth(0.55), 0.6);
        assert_eq!(rectangle_truth(0.75), 0.0);
        assert_eq!(rectangle_truth(0.9), 0.4);
        assert_eq!(rectangle_truth(1.0), 0.4);
    }

    #[test]
    fn sinusoid_values() {
        assert_eq!(sinusoid_truth(0.0), 0.0);
        assert!(sinusoid_truth(1.0).abs() < 1e-28);
        // 40-digit evaluation
        let expected = 0.213_859_520_415_205_873_417_660_488_309_057_331_2;
        assert!((sinusoid_truth(0.3) - expected).abs() < 1e-14);
    }

    #[test]
    fn generated_data_is_reproducible() {
        let a = gen_rectangle(100, 0.002, 5).unwrap();
        let b = gen_rectangle(100, 0.002, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.times[0], 0.0);
        assert_eq!(a.times[99], 1.0);
        let c = gen_rectangle(100, 0.002, 6).unwrap();
        assert_ne!(a.y, c.y);
        let resid: Vec<f64> = a.y.iter().zip(a.truth.as_ref().unwrap()).map(|(y, f)| y - f).collect();
        let var = resid.iter().map(|r| r * r).sum::<f64>() / 100.0;
        assert!(var > 0.001 && var < 0.004);
    }

    #[test]
    fn rmse_basics() {
        let v = vec![0.3, -1.0, 2.5];
        assert_eq!(rmse(&v, &v), 0.0);
        let shifted: Vec<f64> = v.iter().map(|x| x + 0.25).collect();
        assert!((rmse(&v, &shifted) - 0.25).abs() < 1e-15);
    }
}
