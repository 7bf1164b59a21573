//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_finite_matrix(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn is_finite_vector(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a diagonal [6/6] Padé approximant.
///
/// The input is scaled so that its 1-norm is at most 1/2, where the truncation error of
/// the approximant is below 1e-15 relative.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = norm1(a);
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil().max(0.0) as u32;
    }
    let scaled = a / 2f64.powi(squarings as i32);

    // c_k = (2q - k)! q! / ((2q)! k! (q - k)!) with q = 6
    const Q: usize = 6;
    let mut coeffs = [0.0; Q + 1];
    for (k, c) in coeffs.iter_mut().enumerate() {
        *c = factorial(2 * Q - k) * factorial(Q) / (factorial(2 * Q) * factorial(k) * factorial(Q - k));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let mut power = eye.clone();
    let mut num = eye.clone() * coeffs[0];
    let mut den = eye.clone() * coeffs[0];
    for (k, c) in coeffs.iter().enumerate().skip(1) {
        power = &power * &scaled;
        num += &power * *c;
        if k % 2 == 0 {
            den += &power * *c;
        } else {
            den -= &power * *c;
        }
    }
    let mut result = den
        .lu()
        .solve(&num)
        .expect("Padé denominator is non-singular for scaled input");
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Cholesky factorization after adding `rel * trace` to the diagonal.
pub fn cholesky_regularized(m: &DMatrix<f64>, rel: f64) -> Option<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    if n == 0 {
        return Cholesky::new(m.clone());
    }
    let mut reg = symmetrize(m);
    let scale = reg.trace().abs().max(f64::MIN_POSITIVE);
    for i in 0..n {
        reg[(i, i)] += rel * scale;
    }
    Cholesky::new(reg)
}

/// Result of clipping the spectrum of a symmetric matrix from below.
#[derive(Debug, Clone)]
pub struct FlooredMatrix {
    pub matrix: DMatrix<f64>,
    pub min_eigenvalue: f64,
    /// Largest amount any eigenvalue was raised by.
    pub max_shift: f64,
}

/// Symmetrizes and raises every eigenvalue to at least `rel * |trace|`.
pub fn floor_eigenvalues(m: &DMatrix<f64>, rel: f64) -> FlooredMatrix {
    let sym = symmetrize(m);
    let floor = rel * sym.trace().abs();
    let eig = SymmetricEigen::new(sym.clone());
    let min_eigenvalue = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eigenvalue >= floor {
        return FlooredMatrix { matrix: sym, min_eigenvalue, max_shift: 0.0 };
    }
    let mut max_shift: f64 = 0.0;
    let vals = eig.eigenvalues.map(|v| {
        if v < floor {
            max_shift = max_shift.max(floor - v);
            floor
        } else {
            v
        }
    });
    let q = &eig.eigenvectors;
    let matrix = symmetrize(&(q * DMatrix::from_diagonal(&vals) * q.transpose()));
    FlooredMatrix { matrix, min_eigenvalue, max_shift }
}

/// A lower factor `S` with `S Sᵀ = m` for a symmetric PSD matrix; falls back to an
/// eigendecomposition when Cholesky fails (e.g. exactly singular covariances).
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(m);
    if let Some(ch) = Cholesky::new(sym.clone()) {
        return ch.l();
    }
    let eig = SymmetricEigen::new(sym);
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

pub fn log_det_from_cholesky(ch: &Cholesky<f64, Dyn>) -> f64 {
    ch.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum()
}

/// log N(x | mean, cov) given a Cholesky factor of `cov`.
pub fn gaussian_log_pdf_chol(x: &DVector<f64>, mean: &DVector<f64>, ch: &Cholesky<f64, Dyn>) -> f64 {
    let diff = x - mean;
    let n = diff.len() as f64;
    let l = ch.l_dirty();
    let z = l
        .solve_lower_triangular(&diff)
        .unwrap_or_else(|| DVector::from_element(diff.len(), f64::INFINITY));
    let maha = z.norm_squared();
    -0.5 * (maha + log_det_from_cholesky(ch) + n * (2.0 * std::f64::consts::PI).ln())
}

pub fn log_normal_scalar(y: f64, mean: f64, var: f64) -> f64 {
    let d = y - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
}

/// Numerically stable log(sum(exp(v))).
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
