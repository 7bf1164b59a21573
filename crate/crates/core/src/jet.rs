//! Truncated multivariate Taylor polynomials ("jets").
//!
//! A jet stores the Taylor coefficients of a function of `n` variables around a fixed
//! expansion point, up to a total degree `D`. Arithmetic on jets propagates exact
//! derivatives, which is what the iterated Itô generator in the TME discretization needs:
//! applying the generator `r` times consumes up to `2r` orders of differentiation.
//!
//! Monomials are stored in graded order, so every jet truncated at degree `k` is a prefix
//! of the coefficient vector. The degree-one monomials come first after the constant, in
//! variable order, which makes the gradient a contiguous slice.

use std::collections::HashMap;

#[derive(Debug)]
pub struct JetSpace {
    nvars: usize,
    degree: usize,
    exponents: Vec<Vec<u8>>,
    degree_of: Vec<usize>,
    /// `count_upto[k]` = number of monomials of total degree <= k.
    count_upto: Vec<usize>,
    /// `product[i][j]` = index of monomial i * monomial j, for all j with deg(i) + deg(j) <= D.
    product: Vec<Vec<u32>>,
    /// `deriv_src[v][dst]` = index of the monomial whose derivative in variable v is a
    /// multiple of monomial `dst`; defined for deg(dst) < D.
    deriv_src: Vec<Vec<u32>>,
}

fn compositions(total: usize, parts: usize, prefix: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
    if parts == 1 {
        prefix.push(total as u8);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=total).rev() {
        prefix.push(first as u8);
        compositions(total - first, parts - 1, prefix, out);
        prefix.pop();
    }
}

impl JetSpace {
    pub fn new(nvars: usize, degree: usize) -> Self {
        assert!(nvars > 0, "jet space needs at least one variable");
        let mut exponents = Vec::new();
        let mut degree_of = Vec::new();
        let mut count_upto = Vec::with_capacity(degree + 1);
        for k in 0..=degree {
            let mut level = Vec::new();
            compositions(k, nvars, &mut Vec::with_capacity(nvars), &mut level);
            degree_of.extend(std::iter::repeat_n(k, level.len()));
            exponents.extend(level);
            count_upto.push(exponents.len());
        }
        let index: HashMap<Vec<u8>, usize> =
            exponents.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();

        let product = exponents
            .iter()
            .enumerate()
            .map(|(i, ei)| {
                let limit = count_upto[degree - degree_of[i]];
                (0..limit)
                    .map(|j| {
                        let sum: Vec<u8> =
                            ei.iter().zip(&exponents[j]).map(|(a, b)| a + b).collect();
                        index[&sum] as u32
                    })
                    .collect()
            })
            .collect();

        let below = if degree == 0 { 0 } else { count_upto[degree - 1] };
        let deriv_src = (0..nvars)
            .map(|v| {
                (0..below)
                    .map(|dst| {
                        let mut e = exponents[dst].clone();
                        e[v] += 1;
                        index[&e] as u32
                    })
                    .collect()
            })
            .collect();

        Self { nvars, degree, exponents, degree_of, count_upto, product, deriv_src }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    fn count(&self, k: usize) -> usize {
        self.count_upto[k.min(self.degree)]
    }

    pub fn zero(&self) -> Vec<f64> {
        vec![0.0; self.len()]
    }

    pub fn constant(&self, v: f64) -> Vec<f64> {
        let mut c = self.zero();
        c[0] = v;
        c
    }

    /// The jet of `x_var` expanded around `at`.
    pub fn variable(&self, var: usize, at: f64) -> Vec<f64> {
        let mut c = self.constant(at);
        if self.degree >= 1 {
            c[1 + var] = 1.0;
        }
        c
    }

    /// Product truncated at total degree `k`.
    pub fn mul(&self, a: &[f64], b: &[f64], k: usize) -> Vec<f64> {
        let mut out = self.zero();
        self.mul_acc(&mut out, 1.0, a, b, k);
        out
    }

    /// `out += scale * a * b`, truncated at total degree `k`.
    pub fn mul_acc(&self, out: &mut [f64], scale: f64, a: &[f64], b: &[f64], k: usize) {
        let k = k.min(self.degree);
        for (i, &ai) in a[..self.count(k)].iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let s = scale * ai;
            let limit = self.count_upto[k - self.degree_of[i]];
            let row = &self.product[i];
            for (j, &bj) in b[..limit].iter().enumerate() {
                if bj != 0.0 {
                    out[row[j] as usize] += s * bj;
                }
            }
        }
    }

    /// Partial derivative in variable `var`, truncated at degree `k` (must be < D).
    pub fn deriv(&self, a: &[f64], var: usize, k: usize) -> Vec<f64> {
        let mut out = self.zero();
        if self.degree == 0 {
            return out;
        }
        let k = k.min(self.degree - 1);
        let src = &self.deriv_src[var];
        for dst in 0..self.count(k) {
            let s = src[dst] as usize;
            if a[s] != 0.0 {
                out[dst] = a[s] * (self.exponents[dst][var] as f64 + 1.0);
            }
        }
        out
    }

    /// Applies a univariate function given its derivatives `f(a0), f'(a0), ..., f^(k)(a0)`
    /// at the constant term `a0` of `a`.
    pub fn compose(&self, derivs: &[f64], a: &[f64], k: usize) -> Vec<f64> {
        let k = k.min(self.degree);
        let mut h = a.to_vec();
        h[0] = 0.0;
        for v in h.iter_mut().skip(self.count(k)) {
            *v = 0.0;
        }
        let mut out = self.constant(derivs[0]);
        let mut power = self.constant(1.0);
        let mut fact = 1.0;
        for (j, d) in derivs.iter().enumerate().take(k + 1).skip(1) {
            power = self.mul(&power, &h, k);
            fact *= j as f64;
            let c = d / fact;
            for (o, p) in out.iter_mut().zip(&power).take(self.count(k)) {
                *o += c * p;
            }
        }
        out
    }

    pub fn exp(&self, a: &[f64], k: usize) -> Vec<f64> {
        let e = a[0].exp();
        self.compose(&vec![e; k.min(self.degree) + 1], a, k)
    }

    pub fn recip(&self, a: &[f64], k: usize) -> Vec<f64> {
        let k = k.min(self.degree);
        let a0 = a[0];
        // d^j/dx^j (1/x) = (-1)^j j! / x^(j+1)
        let mut derivs = Vec::with_capacity(k + 1);
        let mut fact = 1.0;
        for j in 0..=k {
            if j > 0 {
                fact *= j as f64;
            }
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            derivs.push(sign * fact / a0.powi(j as i32 + 1));
        }
        self.compose(&derivs, a, k)
    }

    pub fn value(a: &[f64]) -> f64 {
        a[0]
    }

    /// First-order coefficients, i.e. the gradient at the expansion point.
    pub fn gradient<'a>(&self, a: &'a [f64]) -> &'a [f64] {
        &a[1..1 + self.nvars]
    }

    pub fn exponents(&self, idx: usize) -> &[u8] {
        &self.exponents[idx]
    }
}

/// Scalar arithmetic used to evaluate drift and diffusion coefficients generically, either
/// on plain numbers or on jets.
pub trait Scalar: Clone {
    fn lift(&self, v: f64) -> Self;
    fn value(&self) -> f64;
    fn add(&self, other: &Self) -> Self;
    fn mul(&self, other: &Self) -> Self;
    fn scale(&self, s: f64) -> Self;
    fn add_scalar(&self, s: f64) -> Self;
    fn exp(&self) -> Self;
    fn recip(&self) -> Self;
}

impl Scalar for f64 {
    fn lift(&self, v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn add(&self, other: &Self) -> Self {
        self + other
    }
    fn mul(&self, other: &Self) -> Self {
        self * other
    }
    fn scale(&self, s: f64) -> Self {
        self * s
    }
    fn add_scalar(&self, s: f64) -> Self {
        self + s
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn recip(&self) -> Self {
        1.0 / self
    }
}

/// A jet bound to its space, at full degree.
#[derive(Clone, Debug)]
pub struct JetNum<'s> {
    pub space: &'s JetSpace,
    pub coeffs: Vec<f64>,
}

impl Scalar for JetNum<'_> {
    fn lift(&self, v: f64) -> Self {
        JetNum { space: self.space, coeffs: self.space.constant(v) }
    }
    fn value(&self) -> f64 {
        self.coeffs[0]
    }
    fn add(&self, other: &Self) -> Self {
        let coeffs = self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + b).collect();
        JetNum { space: self.space, coeffs }
    }
    fn mul(&self, other: &Self) -> Self {
        let coeffs = self.space.mul(&self.coeffs, &other.coeffs, self.space.degree);
        JetNum { space: self.space, coeffs }
    }
    fn scale(&self, s: f64) -> Self {
        JetNum { space: self.space, coeffs: self.coeffs.iter().map(|a| a * s).collect() }
    }
    fn add_scalar(&self, s: f64) -> Self {
        let mut coeffs = self.coeffs.clone();
        coeffs[0] += s;
        JetNum { space: self.space, coeffs }
    }
    fn exp(&self) -> Self {
        JetNum { space: self.space, coeffs: self.space.exp(&self.coeffs, self.space.degree) }
    }
    fn recip(&self) -> Self {
        JetNum { space: self.space, coeffs: self.space.recip(&self.coeffs, self.space.degree) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_counts() {
        let s = JetSpace::new(3, 4);
        // C(3 + 4, 4) = 35
        assert_eq!(s.len(), 35);
        assert_eq!(s.exponents(1), &[1, 0, 0]);
        assert_eq!(s.exponents(3), &[0, 0, 1]);
    }

    #[test]
    fn polynomial_product_and_derivative() {
        let s = JetSpace::new(2, 4);
        // around (1, 2): p = x * y^2
        let x = s.variable(0, 1.0);
        let y = s.variable(1, 2.0);
        let y2 = s.mul(&y, &y, 4);
        let p = s.mul(&x, &y2, 4);
        assert_eq!(p[0], 4.0);
        assert_eq!(s.gradient(&p), &[4.0, 4.0]);
        // d/dy p = 2 x y, d/dx of that = 2 y = 4
        let dy = s.deriv(&p, 1, 3);
        let dxy = s.deriv(&dy, 0, 2);
        assert_eq!(dxy[0], 4.0);
    }

    #[test]
    fn exp_and_recip_match_taylor() {
        let s = JetSpace::new(1, 6);
        let x = s.variable(0, 0.3);
        let e = s.exp(&x, 6);
        let mut fact = 1.0;
        for k in 0..=6 {
            if k > 0 {
                fact *= k as f64;
            }
            assert!((e[k] - 0.3f64.exp() / fact).abs() < 1e-14);
        }
        let r = s.recip(&x, 6);
        for k in 0..=6 {
            let expected = (-1f64).powi(k as i32) / 0.3f64.powi(k as i32 + 1);
            assert!((r[k] - expected).abs() < 1e-9 * expected.abs());
        }
    }

    #[test]
    fn truncation_is_a_prefix() {
        let s = JetSpace::new(2, 5);
        let x = s.variable(0, 0.5);
        let y = s.variable(1, -0.25);
        let full = s.mul(&s.exp(&x, 5), &s.recip(&y, 5), 5);
        let low = s.mul(&s.exp(&x, 5), &s.recip(&y, 5), 2);
        let n2 = 6; // monomials of degree <= 2 in two variables
        assert_eq!(&full[..n2], &low[..n2]);
        assert!(low[n2..].iter().all(|v| *v == 0.0));
    }
}
