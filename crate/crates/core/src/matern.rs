//! Matérn covariance functions and their linear time-invariant SDE representation.
//!
//! A Matérn process with smoothness `ν = α + 1/2` is the first component of the state
//! `(f, Df, …, D^α f)` of a companion-form LTI SDE whose characteristic polynomial is
//! `(s + κ)^(α+1)`, with `κ = sqrt(2ν) / ℓ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{binomial, expm, factorial, symmetrize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternSpec {
    pub smoothness_alpha: usize,
    pub lengthscale: f64,
    pub magnitude: f64,
}

impl MaternSpec {
    pub fn new(smoothness_alpha: usize, lengthscale: f64, magnitude: f64) -> Result<Self> {
        let spec = Self { smoothness_alpha, lengthscale, magnitude };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lengthscale must be positive, got {}",
                self.lengthscale
            )));
        }
        if !(self.magnitude > 0.0 && self.magnitude.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "magnitude must be positive, got {}",
                self.magnitude
            )));
        }
        Ok(())
    }

    pub fn nu(&self) -> f64 {
        self.smoothness_alpha as f64 + 0.5
    }

    pub fn kappa(&self) -> f64 {
        (2.0 * self.nu()).sqrt() / self.lengthscale
    }

    pub fn state_dim(&self) -> usize {
        self.smoothness_alpha + 1
    }
}

/// `dx = A x dt + L dW`, observed through `H x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSde {
    pub drift: DMatrix<f64>,
    pub dispersion: DMatrix<f64>,
    pub observation: DMatrix<f64>,
}

impl LtiSde {
    pub fn state_dim(&self) -> usize {
        self.drift.nrows()
    }
}

/// Coefficients of the companion-form last row: entry `m` is `C(α+1, m) κ^(α+1-m)`.
pub(crate) fn companion_coefficients(alpha: usize) -> Vec<f64> {
    (0..=alpha).map(|m| binomial(alpha + 1, m)).collect()
}

/// `Γ(α+1)² / Γ(2α+1)`, the squared constant in front of the dispersion entry.
pub(crate) fn dispersion_constant_sq(alpha: usize) -> f64 {
    factorial(alpha).powi(2) / factorial(2 * alpha)
}

pub fn matern_sde_coefficients(spec: &MaternSpec) -> LtiSde {
    let alpha = spec.smoothness_alpha;
    let d = alpha + 1;
    let kappa = spec.kappa();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..alpha {
        a[(i, i + 1)] = 1.0;
    }
    for (m, c) in companion_coefficients(alpha).into_iter().enumerate() {
        a[(alpha, m)] = -c * kappa.powi((alpha + 1 - m) as i32);
    }
    let mut l = DMatrix::zeros(d, 1);
    l[(alpha, 0)] = spec.magnitude
        * dispersion_constant_sq(alpha).sqrt()
        * (2.0 * kappa).powf(alpha as f64 + 0.5);
    let mut h = DMatrix::zeros(1, d);
    h[(0, 0)] = 1.0;
    LtiSde { drift: a, dispersion: l, observation: h }
}

/// Solves `A P + P Aᵀ + L Lᵀ = 0` through the vectorized Kronecker system.
pub fn solve_stationary_covariance(sde: &LtiSde) -> Result<DMatrix<f64>> {
    let a = &sde.drift;
    let d = a.nrows();
    let max_re = a
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max_re < 0.0) {
        return Err(Error::NotHurwitz(max_re));
    }
    let eye = DMatrix::<f64>::identity(d, d);
    let system = eye.kronecker(a) + a.kronecker(&eye);
    let qc = &sde.dispersion * sde.dispersion.transpose();
    let rhs = -DVector::from_column_slice(qc.as_slice());
    let vec_p = system
        .lu()
        .solve(&rhs)
        .ok_or(Error::NotHurwitz(max_re))?;
    Ok(symmetrize(&DMatrix::from_column_slice(d, d, vec_p.as_slice())))
}

/// `cov[x(t), x(t2)]` of the stationary solution.
pub fn stationary_cross_covariance(
    sde: &LtiSde,
    p_inf: &DMatrix<f64>,
    t: f64,
    t2: f64,
) -> DMatrix<f64> {
    if t < t2 {
        p_inf * expm(&(&sde.drift * (t2 - t))).transpose()
    } else {
        expm(&(&sde.drift * -(t2 - t))) * p_inf
    }
}

/// Matérn covariance for half-integer smoothness, via the closed-form
/// polynomial-times-exponential expression of `K_ν`.
pub fn matern_covariance(spec: &MaternSpec, t: f64, t2: f64) -> f64 {
    let p = spec.smoothness_alpha;
    let sigma2 = spec.magnitude * spec.magnitude;
    let r = spec.kappa() * (t - t2).abs();
    if r == 0.0 {
        return sigma2;
    }
    let lead = factorial(p) / factorial(2 * p);
    let poly: f64 = (0..=p)
        .map(|i| factorial(p + i) / (factorial(i) * factorial(p - i)) * (2.0 * r).powi((p - i) as i32))
        .sum();
    sigma2 * (-r).exp() * lead * poly
}
