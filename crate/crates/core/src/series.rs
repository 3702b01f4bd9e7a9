//! Truncated formal power series over `f64`.
//!
//! A [`TruncatedSeries`] holds the coefficients of a power series modulo
//! `s^(N+1)`. All arithmetic is exact truncation of the exact operation;
//! composition admits a non-zero inner constant term (the outer series is
//! a polynomial of degree at most `N`, so Horner evaluation is a finite
//! sum). This is the coefficient-level oracle that the generating-function
//! and limit modules are checked against.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SeriesError {
    #[error("truncation degrees differ: {0} vs {1}")]
    DegreeMismatch(usize, usize),
    #[error("inner constant term {0} lies outside the unit disc")]
    InnerConstantOutOfRange(f64),
}

/// Coefficients of a power series modulo `s^(N+1)`; `coeffs[j]` is the
/// coefficient of `s^j` and `N = coeffs.len() - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSeries {
    coeffs: Vec<f64>,
}

impl TruncatedSeries {
    /// Wraps a coefficient vector; the truncation degree is implied by
    /// its length.
    pub fn from_coeffs(coeffs: Vec<f64>) -> Self {
        assert!(!coeffs.is_empty(), "a series needs at least a constant term");
        Self { coeffs }
    }

    pub fn zero(degree: usize) -> Self {
        Self {
            coeffs: vec![0.0; degree + 1],
        }
    }

    pub fn constant(value: f64, degree: usize) -> Self {
        let mut s = Self::zero(degree);
        s.coeffs[0] = value;
        s
    }

    /// The series `s` itself.
    pub fn identity(degree: usize) -> Self {
        let mut s = Self::zero(degree);
        if degree >= 1 {
            s.coeffs[1] = 1.0;
        }
        s
    }

    /// Truncation degree `N`.
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeff(&self, j: usize) -> f64 {
        self.coeffs.get(j).copied().unwrap_or(0.0)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Horner evaluation of the truncated polynomial at `s`.
    pub fn eval(&self, s: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * s + c)
    }

    pub fn add(&self, other: &Self) -> Result<Self, SeriesError> {
        self.check_degree(other)?;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self { coeffs })
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
        }
    }

    /// Cauchy product truncated at the common degree.
    pub fn mul(&self, other: &Self) -> Result<Self, SeriesError> {
        self.check_degree(other)?;
        let n = self.coeffs.len();
        let mut coeffs = vec![0.0; n];
        for (i, &a) in self.coeffs.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (b, c) in other.coeffs[..n - i].iter().zip(&mut coeffs[i..]) {
                *c += a * b;
            }
        }
        Ok(Self { coeffs })
    }

    /// Horner-style composition `self(inner)` truncated at the common
    /// degree. Well defined for `|inner(0)| < 1`.
    pub fn compose(&self, inner: &Self) -> Result<Self, SeriesError> {
        self.check_degree(inner)?;
        if inner.coeff(0).abs() >= 1.0 {
            return Err(SeriesError::InnerConstantOutOfRange(inner.coeff(0)));
        }
        let degree = self.degree();
        let mut acc = Self::constant(self.coeff(degree), degree);
        for j in (0..degree).rev() {
            acc = acc.mul(inner)?;
            acc.coeffs[0] += self.coeffs[j];
        }
        Ok(acc)
    }

    /// Termwise derivative, zero-padded back to the original degree.
    pub fn derivative(&self) -> Self {
        let mut coeffs = vec![0.0; self.coeffs.len()];
        for (j, c) in self.coeffs.iter().enumerate().skip(1) {
            coeffs[j - 1] = j as f64 * c;
        }
        Self { coeffs }
    }

    /// Upper bound on `sum_{j>N} c_j s^j` assuming the coefficients keep
    /// decaying at the rate observed between the last two stored ones.
    /// Returns infinity when no decaying ratio can be read off.
    pub fn geometric_tail_bound(&self, s: f64) -> f64 {
        let n = self.degree();
        if n == 0 {
            return f64::INFINITY;
        }
        let last = self.coeffs[n].abs();
        if last == 0.0 {
            return 0.0;
        }
        let prev = self.coeffs[n - 1].abs();
        if prev == 0.0 {
            return f64::INFINITY;
        }
        let ratio = (last / prev) * s.abs();
        if ratio >= 1.0 {
            return f64::INFINITY;
        }
        last * s.abs().powi(n as i32) * ratio / (1.0 - ratio)
    }

    fn check_degree(&self, other: &Self) -> Result<(), SeriesError> {
        if self.coeffs.len() != other.coeffs.len() {
            return Err(SeriesError::DegreeMismatch(self.degree(), other.degree()));
        }
        Ok(())
    }
}
