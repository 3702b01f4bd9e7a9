//! Limit objects governing the conditioned process as the observation
//! time grows: the infinite products `H` (positive-multiplier regime)
//! and `R` (minimal offspring at least two), survival-tail asymptotics,
//! the limiting conditional distributions `q_j` and `q_{k,j}`, the
//! inhomogeneous backward kernel `Q^(k)` with its stationary limit, and
//! the drift profile `c(k)` together with its certified truncation bound.
//!
//! Infinite products are truncated adaptively: a factor sequence is cut
//! once its log-magnitude falls below `tol * (1 - ratio)` for an observed
//! geometric decay `ratio < 1`, which certifies a relative tail below
//! `tol`. A hard cap guards against non-contracting inputs.

use thiserror::Error;

use crate::pgf::{pow_sum, DefectivePgf, DerivedParams};
use crate::series::TruncatedSeries;

#[derive(Debug, Error, PartialEq)]
pub enum LimitError {
    #[error("requires gamma > 0, got gamma = {0}")]
    PositiveGammaRequired(f64),
    #[error("requires minimal offspring >= 2, got {0}")]
    MinOffspringTooSmall(usize),
    #[error("requires a defective law (ε > 0)")]
    DefectRequired,
    #[error("requires an interior extinction probability, got q = {0}")]
    InteriorRootRequired(f64),
    #[error("argument {0} outside [0, 1]")]
    DomainError(f64),
    #[error("product did not certify convergence within {max_factors} factors")]
    ProductNotConverged { max_factors: usize },
    #[error("truncated tail mass {tail} exceeds {tol}; increase the degree")]
    TailMassTooLarge { tail: f64, tol: f64 },
    #[error("conditioning denominator underflowed at k = {k}")]
    DenominatorUnderflow { k: u32 },
}

const MAX_FACTORS: usize = 10_000;

fn check_unit_interval(s: f64) -> Result<(), LimitError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(LimitError::DomainError(s));
    }
    Ok(())
}

/// Single factor `h(s) = (f(s) - q) / ((s - q) γ)` of the `H` product,
/// evaluated through the deflated quotient so the removable singularity
/// at `s = q` needs no special casing.
pub fn h_factor(pgf: &DefectivePgf, params: &DerivedParams, s: f64) -> Result<f64, LimitError> {
    check_unit_interval(s)?;
    if params.gamma <= 0.0 {
        return Err(LimitError::PositiveGammaRequired(params.gamma));
    }
    let quotient = deflated_quotient(pgf, params.q);
    Ok(horner(&quotient, s) / params.gamma)
}

/// Coefficients of `(f(s) - q) / (s - q)`, by synthetic division at the
/// root `q`; the solver residual is the discarded remainder.
fn deflated_quotient(pgf: &DefectivePgf, q: f64) -> Vec<f64> {
    let pmf = pgf.pmf();
    let d = pgf.max_offspring();
    let mut quotient = vec![0.0; d];
    quotient[d - 1] = pmf[d];
    for k in (1..d).rev() {
        quotient[k - 1] = pmf[k] + q * quotient[k];
    }
    quotient
}

fn horner(coeffs: &[f64], s: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * s + c)
}

/// The limit generating function `H(s) = Π_j h(f(j, s))` of the
/// `γ > 0` regime, with `H(q) = 1` and `H(1) < ∞` for defective laws.
#[derive(Debug, Clone)]
pub struct HFunction {
    pgf: DefectivePgf,
    params: DerivedParams,
    /// coefficients of `h(s)`, i.e. the deflated quotient over `γ`
    h_coeffs: Vec<f64>,
    tol: f64,
}

impl HFunction {
    pub fn new(
        pgf: &DefectivePgf,
        params: &DerivedParams,
        tol: f64,
    ) -> Result<Self, LimitError> {
        if params.gamma <= 0.0 {
            return Err(LimitError::PositiveGammaRequired(params.gamma));
        }
        if !pgf.is_defective() {
            return Err(LimitError::DefectRequired);
        }
        let h_coeffs: Vec<f64> = deflated_quotient(pgf, params.q)
            .iter()
            .map(|c| c / params.gamma)
            .collect();
        Ok(Self {
            pgf: pgf.clone(),
            params: params.clone(),
            h_coeffs,
            tol,
        })
    }

    pub fn params(&self) -> &DerivedParams {
        &self.params
    }

    fn factor_at(&self, x: f64) -> f64 {
        horner(&self.h_coeffs, x)
    }

    /// Adaptively truncated product `Π_{j < j_max} h(f(j, s))`.
    pub fn eval(&self, s: f64) -> Result<f64, LimitError> {
        check_unit_interval(s)?;
        let mut log_sum = 0.0;
        let mut x = s;
        let mut prev_abs = f64::INFINITY;
        for _ in 0..MAX_FACTORS {
            let lf = self.factor_at(x).ln();
            log_sum += lf;
            let abs = lf.abs();
            if abs == 0.0 {
                return Ok(log_sum.exp());
            }
            let ratio = abs / prev_abs;
            if ratio < 1.0 && abs < self.tol * (1.0 - ratio) {
                return Ok(log_sum.exp());
            }
            prev_abs = abs;
            x = self.pgf.eval(x).expect("iterates stay in [0, 1]");
        }
        Err(LimitError::ProductNotConverged {
            max_factors: MAX_FACTORS,
        })
    }

    /// `H` as a truncated series: the product of the composed factors
    /// `h(f(j, ·))`, with the same adaptive cut as the pointwise product.
    pub fn series(&self, degree: usize) -> Result<TruncatedSeries, LimitError> {
        let mut h_padded = self.h_coeffs.clone();
        h_padded.resize(degree + 1, 0.0);
        let h_series = TruncatedSeries::from_coeffs(h_padded);
        let f_series = self.pgf.to_series(degree);

        let mut product = TruncatedSeries::constant(1.0, degree);
        let mut iterate = TruncatedSeries::identity(degree);
        let mut prev_dev = f64::INFINITY;
        for _ in 0..MAX_FACTORS {
            let factor = h_series.compose(&iterate).expect("degrees match");
            product = product.mul(&factor).expect("degrees match");
            let dev = factor
                .coeffs()
                .iter()
                .enumerate()
                .map(|(j, &c)| (c - if j == 0 { 1.0 } else { 0.0 }).abs())
                .fold(0.0, f64::max);
            if dev == 0.0 {
                return Ok(product);
            }
            let ratio = dev / prev_dev;
            if ratio < 1.0 && dev < self.tol * (1.0 - ratio) {
                return Ok(product);
            }
            prev_dev = dev;
            iterate = f_series.compose(&iterate).expect("degrees match");
        }
        Err(LimitError::ProductNotConverged {
            max_factors: MAX_FACTORS,
        })
    }

    /// The limiting conditional distribution `(q_j)`: coefficients of
    /// `[(s - q) H(s) + q H(0)] / [(1 - q) H(1) + q H(0)]`. The entry at
    /// index `j` is `q_j`; index zero is zero up to rounding.
    pub fn limit_distribution(
        &self,
        degree: usize,
        tail_tol: f64,
    ) -> Result<Vec<f64>, LimitError> {
        let h = self.series(degree)?;
        let h0 = self.eval(0.0)?;
        let h1 = self.eval(1.0)?;
        let q = self.params.q;

        let mut shift_coeffs = vec![0.0; degree + 1];
        shift_coeffs[0] = -q;
        shift_coeffs[1] = 1.0;
        let shift = TruncatedSeries::from_coeffs(shift_coeffs);
        let mut coeffs = h.mul(&shift).expect("degrees match").into_coeffs();
        coeffs[0] += q * h0;

        let norm = (1.0 - q) * h1 + q * h0;
        let mut out: Vec<f64> = coeffs.iter().map(|c| c / norm).collect();
        for c in &mut out {
            debug_assert!(*c > -1e-12, "limit distribution entry {c} is negative");
            *c = c.max(0.0);
        }
        let total: f64 = out.iter().sum();
        let tail = 1.0 - total;
        if tail.abs() > tail_tol {
            return Err(LimitError::TailMassTooLarge {
                tail,
                tol: tail_tol,
            });
        }
        Ok(out)
    }

    /// The limiting distribution of `Z(t - k)` conditioned on `T > t`:
    /// `q_{k,j} = q_j γ^{-k} (f(k,1)^j - f(k,0)^j)`.
    pub fn lagged_distribution(
        &self,
        k: u32,
        degree: usize,
        tail_tol: f64,
    ) -> Result<Vec<f64>, LimitError> {
        let qj = self.limit_distribution(degree, tail_tol)?;
        let pair = self.pgf.iterate_pair_diff(k, 1.0, 0.0);
        let scale = self.params.gamma.powi(-(k as i32));
        let out: Vec<f64> = qj
            .iter()
            .enumerate()
            .map(|(j, &v)| v * scale * pair.diff * pow_sum(pair.upper, pair.lower, j as u64))
            .collect();
        let total: f64 = out.iter().sum();
        if (1.0 - total).abs() > tail_tol {
            return Err(LimitError::TailMassTooLarge {
                tail: 1.0 - total,
                tol: tail_tol,
            });
        }
        Ok(out)
    }
}

/// The limit function `R(s)` of the `γ = 0` regime (minimal offspring
/// `l >= 2`), its logarithmic derivative `R̄ = R'/R`, the truncated
/// variants entering the finite-time identities, and the drift profile.
#[derive(Debug, Clone)]
pub struct RFunction {
    pgf: DefectivePgf,
    params: DerivedParams,
    /// coefficients of `b(s) = f(s) / (p_l s^l)`
    b_coeffs: Vec<f64>,
    tol: f64,
}

impl RFunction {
    pub fn new(
        pgf: &DefectivePgf,
        params: &DerivedParams,
        tol: f64,
    ) -> Result<Self, LimitError> {
        let l = params.min_offspring;
        if l < 2 {
            return Err(LimitError::MinOffspringTooSmall(l));
        }
        if !pgf.is_defective() {
            return Err(LimitError::DefectRequired);
        }
        let p_l = params.p_min;
        let b_coeffs: Vec<f64> = pgf.pmf()[l..].iter().map(|p| p / p_l).collect();
        Ok(Self {
            pgf: pgf.clone(),
            params: params.clone(),
            b_coeffs,
            tol,
        })
    }

    pub fn params(&self) -> &DerivedParams {
        &self.params
    }

    pub fn b_at(&self, s: f64) -> f64 {
        horner(&self.b_coeffs, s)
    }

    fn b_prime_at(&self, s: f64) -> f64 {
        self.b_coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, &c)| acc * s + k as f64 * c)
    }

    /// `ln R(s) = Σ_j l^{-j-1} ln b(f(j, s))`. The weights alone make
    /// the tail geometric with ratio `1/l`, so the cut is certified by
    /// `ln b(1)` without observing the decay.
    pub fn log_eval(&self, s: f64) -> Result<f64, LimitError> {
        check_unit_interval(s)?;
        let l = self.params.min_offspring as f64;
        let ln_b1 = self.b_at(1.0).ln();
        let mut acc = 0.0;
        let mut x = s;
        let mut weight = 1.0 / l;
        for _ in 0..MAX_FACTORS {
            acc += weight * self.b_at(x).ln();
            let tail_bound = weight * ln_b1 / (l - 1.0);
            if tail_bound < self.tol {
                return Ok(acc);
            }
            x = self.pgf.eval(x).expect("iterates stay in [0, 1]");
            weight /= l;
        }
        Err(LimitError::ProductNotConverged {
            max_factors: MAX_FACTORS,
        })
    }

    pub fn eval(&self, s: f64) -> Result<f64, LimitError> {
        Ok(self.log_eval(s)?.exp())
    }

    /// `ρ = p_l^{1/(l-1)} R(1)`, the base of the doubly exponential
    /// survival decay; lies in `(0, 1)` for defective laws.
    pub fn rho(&self) -> Result<f64, LimitError> {
        Ok(self.log_rho()?.exp())
    }

    pub fn log_rho(&self) -> Result<f64, LimitError> {
        let l = self.params.min_offspring as f64;
        Ok(self.params.p_min.ln() / (l - 1.0) + self.log_eval(1.0)?)
    }

    /// `R̄(s) = R'(s)/R(s)`, truncated once the certified remainder
    /// drops below the tolerance.
    pub fn log_derivative(&self, s: f64) -> Result<f64, LimitError> {
        check_unit_interval(s)?;
        let l = self.params.min_offspring as f64;
        let bp1 = self.b_prime_at(1.0);
        let mut acc = 0.0;
        let mut x = s;
        let mut deriv = 1.0; // f'(j, s)
        let mut weight = 1.0 / l;
        for _ in 0..MAX_FACTORS {
            acc += weight * self.b_prime_at(x) * deriv / self.b_at(x);
            let gamma_here = self.pgf.derivative_at(x);
            let next_deriv = deriv * gamma_here;
            // once the iterate derivative contracts, the remaining terms
            // are dominated by a geometric series
            if gamma_here < 1.0 {
                let tail_bound = weight / l * bp1 * next_deriv / (1.0 - gamma_here / l);
                if tail_bound < self.tol * acc.max(1e-300) {
                    return Ok(acc);
                }
            }
            deriv = next_deriv;
            x = self.pgf.eval(x).expect("iterates stay in [0, 1]");
            weight /= l;
        }
        Err(LimitError::ProductNotConverged {
            max_factors: MAX_FACTORS,
        })
    }

    /// `R̄_t(s)`, the `t`-term truncation of `R̄`.
    pub fn log_derivative_truncated(&self, s: f64, t: u32) -> f64 {
        let l = self.params.min_offspring as f64;
        let mut acc = 0.0;
        let mut x = s;
        let mut deriv = 1.0;
        let mut weight = 1.0 / l;
        for _ in 0..t {
            acc += weight * self.b_prime_at(x) * deriv / self.b_at(x);
            deriv *= self.pgf.derivative_at(x);
            x = self.pgf.eval(x).expect("iterates stay in [0, 1]");
            weight /= l;
        }
        acc
    }

    /// Drift profile `c(k) = 1 + f(k, 1) R̄(f(k, 1))`; strictly
    /// decreasing to one.
    pub fn drift(&self, k: u32) -> Result<f64, LimitError> {
        Ok(1.0 + self.drift_excess(k)?)
    }

    /// `c(k) - 1`, kept separate because the excess itself decays
    /// doubly exponentially and drops below one ulp of 1 around `k = 8`.
    pub fn drift_excess(&self, k: u32) -> Result<f64, LimitError> {
        let x = self.pgf.iterate(k, 1.0).expect("1 is in the domain");
        Ok(x * self.log_derivative(x)?)
    }

    /// `δ_t = Σ_{j >= t} γ_0 ... γ_{j-1}` with `γ_i = f'(f(i, 1))`,
    /// including a certified geometric remainder.
    pub fn delta(&self, t: u32) -> f64 {
        let mut x = 1.0;
        let mut prod = 1.0; // γ_0 ... γ_{j-1}
        let mut acc = 0.0;
        for j in 0..MAX_FACTORS as u32 {
            let gamma_here = self.pgf.derivative_at(x);
            if j >= t {
                acc += prod;
                if gamma_here < 0.5 {
                    // remaining sum ≤ prod * γ/(1 - γ)
                    let rest = prod * gamma_here / (1.0 - gamma_here);
                    if rest < 1e-16 * acc + 1e-300 {
                        return acc + rest;
                    }
                }
            }
            prod *= gamma_here;
            x = self.pgf.eval(x).expect("iterates stay in [0, 1]");
        }
        acc
    }

    /// The certified truncation error bound `f'(1) δ_t / p_l` dominating
    /// `R̄(s) - R̄_t(s)` uniformly on `[0, 1]`.
    pub fn truncation_bound(&self, t: u32) -> f64 {
        self.pgf.mean() * self.delta(t) / self.params.p_min
    }
}

/// Exact versus asymptotic survival tail at time `t`. In the `γ > 0`
/// regime the approximation is `γ^t [q H(0) + (1-q) H(1)]`; for minimal
/// offspring at least two it is `p_l^{-1/(l-1)} ρ^{l^t}`, assembled in
/// log space.
#[derive(Debug, Clone, Copy)]
pub struct TailAsymptotics {
    pub exact: f64,
    pub approx: f64,
}

impl TailAsymptotics {
    pub fn ratio(&self) -> f64 {
        self.exact / self.approx
    }
}

pub fn tail_asymptotics(
    pgf: &DefectivePgf,
    params: &DerivedParams,
    t: u32,
    tol: f64,
) -> Result<TailAsymptotics, LimitError> {
    let exact = pgf.iterate_pair_diff(t, 1.0, 0.0).diff;
    if params.gamma > 0.0 {
        let h = HFunction::new(pgf, params, tol)?;
        let constant = params.q * h.eval(0.0)? + (1.0 - params.q) * h.eval(1.0)?;
        let approx = params.gamma.powi(t as i32) * constant;
        Ok(TailAsymptotics { exact, approx })
    } else {
        let r = RFunction::new(pgf, params, tol)?;
        let l = params.min_offspring as f64;
        let log_approx = l.powi(t as i32) * r.log_rho()? - params.p_min.ln() / (l - 1.0);
        Ok(TailAsymptotics {
            exact,
            approx: log_approx.exp(),
        })
    }
}

/// Row `i` of the backward kernel
/// `Q^(k)_{ij} = P_ij (f(k-1,1)^j - f(k-1,0)^j) / (f(k,1)^i - f(k,0)^i)`,
/// assembled from stable power divided differences.
pub fn kernel_row(
    pgf: &DefectivePgf,
    k: u32,
    i: u64,
    degree: usize,
) -> Result<Vec<f64>, LimitError> {
    assert!(k >= 1 && i >= 1, "kernel rows need k >= 1 and i >= 1");
    let outer = pgf.iterate_pair_diff(k, 1.0, 0.0);
    let inner = pgf.iterate_pair_diff(k - 1, 1.0, 0.0);
    let denom = outer.diff * pow_sum(outer.upper, outer.lower, i);
    if denom <= f64::MIN_POSITIVE {
        return Err(LimitError::DenominatorUnderflow { k });
    }
    let row = pgf.transition_row(i, degree);
    Ok(row
        .probs
        .iter()
        .enumerate()
        .map(|(j, &p)| p * inner.diff * pow_sum(inner.upper, inner.lower, j as u64) / denom)
        .collect())
}

/// The stationary limit of `Q^(k)` as `k → ∞` for interior `q`:
/// `P_ij j q^(j-i) / (γ i)`.
pub fn qprocess_kernel(
    pgf: &DefectivePgf,
    params: &DerivedParams,
    i: u64,
    j: u64,
) -> Result<f64, LimitError> {
    if !(params.q > 0.0 && params.q < 1.0) {
        return Err(LimitError::InteriorRootRequired(params.q));
    }
    assert!(i >= 1, "kernel rows start from state 1");
    let degree = (j as usize).max(i as usize * pgf.max_offspring());
    let row = pgf.transition_row(i, degree);
    let p_ij = row.probs.get(j as usize).copied().unwrap_or(0.0);
    Ok(p_ij * j as f64 * params.q.powi(j as i32 - i as i32) / (params.gamma * i as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1_law() -> DefectivePgf {
        DefectivePgf::new(vec![0.0, 0.0, 0.7, 0.2]).unwrap()
    }

    fn quadratic_law() -> DefectivePgf {
        DefectivePgf::new(vec![0.25, 0.0, 0.25]).unwrap()
    }

    const TOL: f64 = 1e-13;

    #[test]
    fn h_factor_hand_values() {
        let law = quadratic_law();
        let params = law.derived_params().unwrap();
        // removable singularity: h(q) = 1
        assert!((h_factor(&law, &params, params.q).unwrap() - 1.0).abs() < 1e-13);
        // h(1) = (f(1) - q)/((1 - q) γ) = (3 + sqrt 3)/2
        let expected = (3.0 + 3.0f64.sqrt()) / 2.0;
        assert!((h_factor(&law, &params, 1.0).unwrap() - expected).abs() < 1e-12);
        // h(0) = (p0 - q)/(-q γ)
        let h0 = (0.25 - params.q) / (-params.q * params.gamma);
        assert!((h_factor(&law, &params, 0.0).unwrap() - h0).abs() < 1e-12);
    }

    #[test]
    fn regime_guards_reject_wrong_laws() {
        let fig1 = fig1_law();
        let fp = fig1.derived_params().unwrap();
        assert!(matches!(
            HFunction::new(&fig1, &fp, TOL),
            Err(LimitError::PositiveGammaRequired(_))
        ));
        let quad = quadratic_law();
        let qp = quad.derived_params().unwrap();
        assert!(matches!(
            RFunction::new(&quad, &qp, TOL),
            Err(LimitError::MinOffspringTooSmall(0))
        ));
        let proper = DefectivePgf::new(vec![0.25, 0.0, 0.75]).unwrap();
        let pp = proper.derived_params().unwrap();
        assert!(matches!(
            HFunction::new(&proper, &pp, TOL),
            Err(LimitError::DefectRequired)
        ));
        assert!(matches!(
            qprocess_kernel(&fig1, &fp, 2, 4),
            Err(LimitError::InteriorRootRequired(_))
        ));
    }

    #[test]
    fn h_is_one_at_q_and_ordered_around_it() {
        let law = quadratic_law();
        let params = law.derived_params().unwrap();
        let h = HFunction::new(&law, &params, TOL).unwrap();
        assert_eq!(h.eval(params.q).unwrap(), 1.0);
        assert!(h.eval(0.0).unwrap() < 1.0);
        assert!(h.eval(0.1).unwrap() < 1.0);
        assert!(h.eval(0.5).unwrap() > 1.0);
        assert!(h.eval(1.0).unwrap() > 1.0);
    }

    #[test]
    fn h_satisfies_its_functional_equation() {
        // (f(s) - q) H(f(s)) = γ (s - q) H(s)
        let law = quadratic_law();
        let params = law.derived_params().unwrap();
        let h = HFunction::new(&law, &params, TOL).unwrap();
        for i in 0..=10 {
            let s = i as f64 / 10.0;
            let fs = law.eval(s).unwrap();
            let lhs = (fs - params.q) * h.eval(fs).unwrap();
            let rhs = params.gamma * (s - params.q) * h.eval(s).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "s = {s}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn h_normalizes_the_deep_iterates() {
        // (f(t,s) - q) / ((s - q) H(s) γ^t) → 1, monotonically from above
        // below q and from below above q
        let law = quadratic_law();
        let params = law.derived_params().unwrap();
        let h = HFunction::new(&law, &params, TOL).unwrap();
        for s in [0.0, 0.5, 1.0] {
            let hs = h.eval(s).unwrap();
            let mut prev = if s < params.q { f64::INFINITY } else { 0.0 };
            for t in 1..=12u32 {
                let u = law.iterate_shifted(&params, t, s);
                let ratio = u / ((s - params.q) * hs * params.gamma.powi(t as i32));
                if s < params.q {
                    assert!(ratio >= 1.0 - 1e-12 && ratio <= prev + 1e-12);
                } else {
                    assert!(ratio <= 1.0 + 1e-12 && ratio >= prev - 1e-12);
                }
                prev = ratio;
            }
            let u30 = law.iterate_shifted(&params, 30, s);
            let ratio = u30 / ((s - params.q) * hs * params.gamma.powi(30));
            assert!((ratio - 1.0).abs() < 1e-6, "s = {s}: ratio {ratio}");
        }
    }

    #[test]
    fn h_series_agrees_with_pointwise_product() {
        let law = quadratic_law();
        let params = law.derived_params().unwrap();
        let h = HFunction::new(&law, &params, TOL).unwrap();
        let series = h.series(48).unwrap();
        for s in [0.0, 0.2, 0.5] {
            let tail = series.geometric_tail_bound(s);
            assert!(tail < 1e-11, "tail bound {tail} at s = {s}");
            assert!((series.eval(s) - h.eval(s).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn limit_distribution_is_proper_and_matches_conditional_law() {
        let law = quadratic_law();
        let params = law.derived_params().unwrap();
        let h = HFunction::new(&law, &params, TOL).unwrap();
        let qj = h.limit_distribution(64, 1e-8).unwrap();
        assert!(qj[0].abs() < 1e-12);
        assert!(qj.iter().all(|&v| v >= 0.0));

        // two independent routes to q_1: the series coefficients, and the
        // numerical limit of P(Z(t) = 1 | T > t)
        let t = 25;
        let gen = law.iterate_series(t, 64);
        let alive_mass: f64 = gen.coeffs()[1..].iter().sum();
        let q1_limit = gen.coeff(1) / alive_mass;
        assert!((qj[1] - q1_limit).abs() < 1e-6, "{} vs {q1_limit}", qj[1]);

        // the mean of (q_j) equals the limit of E(Z(t) | T > t)
        let mean: f64 = qj.iter().enumerate().map(|(j, &v)| j as f64 * v).sum();
        let (cond_mean, _) = law.conditional_mean_var(30, 30).unwrap();
        assert!((mean - cond_mean).abs() < 1e-8, "{mean} vs {cond_mean}");
    }

    #[test]
    fn limit_distribution_with_zero_root_is_shifted_h() {
        // l = 1 keeps γ > 0 with q = 0: q_j are the coefficients of
        // s H(s) / H(1)
        let law = DefectivePgf::new(vec![0.0, 0.5, 0.3]).unwrap();
        let params = law.derived_params().unwrap();
        assert_eq!(params.q, 0.0);
        let h = HFunction::new(&law, &params, TOL).unwrap();
        let qj = h.limit_distribution(64, 1e-8).unwrap();
        assert_eq!(qj[0], 0.0);
        let h1 = h.eval(1.0).unwrap();
        let series = h.series(64).unwrap();
        for j in 1..10 {
            assert!((qj[j] - series.coeff(j - 1) / h1).abs() < 1e-12);
        }
    }

    #[test]
    fn lagged_distribution_is_proper_and_reduces_at_zero() {
        let law = quadratic_law();
        let params = law.derived_params().unwrap();
        let h = HFunction::new(&law, &params, TOL).unwrap();
        let qj = h.limit_distribution(64, 1e-8).unwrap();
        let q0 = h.lagged_distribution(0, 64, 1e-8).unwrap();
        for (a, b) in qj.iter().zip(&q0) {
            assert!((a - b).abs() < 1e-14);
        }
        for k in 1..=3 {
            let qkj = h.lagged_distribution(k, 64, 1e-8).unwrap();
            let total: f64 = qkj.iter().sum();
            assert!((total - 1.0).abs() < 1e-8, "k = {k}: {total}");
            assert!(qkj.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn r_is_one_at_zero_and_increasing() {
        let law = fig1_law();
        let params = law.derived_params().unwrap();
        let r = RFunction::new(&law, &params, 1e-13).unwrap();
        assert_eq!(r.eval(0.0).unwrap(), 1.0);
        let mut prev = 1.0;
        for i in 1..=10 {
            let v = r.eval(i as f64 / 10.0).unwrap();
            assert!(v > prev);
            prev = v;
        }
        // 1 = R(0) < R(1) < p_l^{-1/(l-1)}
        assert!(prev < 0.7f64.powf(-1.0));
    }

    #[test]
    fn r_value_is_stable_under_tolerance_refinement() {
        let law = fig1_law();
        let params = law.derived_params().unwrap();
        let coarse = RFunction::new(&law, &params, 1e-10).unwrap();
        let fine = RFunction::new(&law, &params, 1e-14).unwrap();
        assert!((coarse.eval(1.0).unwrap() - fine.eval(1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rho_lies_strictly_inside_the_unit_interval() {
        let law = fig1_law();
        let params = law.derived_params().unwrap();
        let r = RFunction::new(&law, &params, 1e-13).unwrap();
        let rho = r.rho().unwrap();
        assert!(rho > 0.0 && rho < 1.0, "rho = {rho}");
        assert!((rho - 0.7 * r.eval(1.0).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn r_satisfies_its_functional_equation() {
        // f(s) R(f(s)) = p_l (s R(s))^l
        let law = fig1_law();
        let params = law.derived_params().unwrap();
        let r = RFunction::new(&law, &params, 1e-13).unwrap();
        for i in 1..=10 {
            let s = i as f64 / 10.0;
            let fs = law.eval(s).unwrap();
            let lhs = fs * r.eval(fs).unwrap();
            let rhs = 0.7 * (s * r.eval(s).unwrap()).powi(2);
            assert!((lhs - rhs).abs() < 1e-10, "s = {s}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn r_normalizes_the_deep_iterates() {
        // f(t,s) / (π_t (s R(s))^{l^t}) → 1 for s in (0, 1]
        let law = fig1_law();
        let params = law.derived_params().unwrap();
        let r = RFunction::new(&law, &params, 1e-13).unwrap();
        for s in [0.3, 0.7, 1.0] {
            let log_sr = (s * r.eval(s).unwrap()).ln();
            for t in [7u32, 12] {
                let log_f = law.iterate_log(t, s).unwrap();
                let log_predicted = params.log_pi(t) + 2f64.powi(t as i32) * log_sr;
                let err = (log_f - log_predicted).exp() - 1.0;
                assert!(err.abs() < 1e-3, "t = {t}, s = {s}: {err}");
            }
        }
    }

    #[test]
    fn tail_asymptotics_converges_in_both_regimes() {
        let quad = quadratic_law();
        let qp = quad.derived_params().unwrap();
        let tails = tail_asymptotics(&quad, &qp, 30, TOL).unwrap();
        assert!((tails.ratio() - 1.0).abs() < 1e-6, "{}", tails.ratio());

        let fig1 = fig1_law();
        let fp = fig1.derived_params().unwrap();
        let tails = tail_asymptotics(&fig1, &fp, 7, 1e-13).unwrap();
        assert!((tails.ratio() - 1.0).abs() < 1e-3, "{}", tails.ratio());
        // no asymptotic claim at t = 1, but both sides stay positive
        let t1 = tail_asymptotics(&fig1, &fp, 1, 1e-13).unwrap();
        assert!(t1.exact > 0.0 && t1.approx > 0.0);
    }

    #[test]
    fn kernel_rows_sum_to_one() {
        for law in [fig1_law(), quadratic_law()] {
            let d = law.max_offspring();
            for k in 1..=5u32 {
                for i in 1..=5u64 {
                    let row = kernel_row(&law, k, i, i as usize * d).unwrap();
                    let total: f64 = row.iter().sum();
                    assert!((total - 1.0).abs() < 1e-12, "k = {k}, i = {i}: {total}");
                }
            }
        }
    }

    #[test]
    fn kernel_at_k_one_reduces_for_zero_extinction_laws() {
        // with p_0 = 0: Q^(1)_{ij} = P_ij / f(1)^i for j >= 1
        let law = fig1_law();
        let i = 2u64;
        let row = kernel_row(&law, 1, i, 6).unwrap();
        let p_row = law.transition_row(i, 6);
        for j in 1..=6 {
            let expected = p_row.probs[j] / 0.9f64.powi(i as i32);
            assert!((row[j] - expected).abs() < 1e-13);
        }
        assert_eq!(row[0], 0.0);
    }

    #[test]
    fn kernel_underflow_is_reported_for_doubly_exponential_laws() {
        let law = fig1_law();
        assert!(matches!(
            kernel_row(&law, 40, 1, 3),
            Err(LimitError::DenominatorUnderflow { .. })
        ));
    }

    #[test]
    fn kernel_converges_to_the_stationary_limit() {
        let law = quadratic_law();
        let params = law.derived_params().unwrap();
        for i in 1..=6u64 {
            let row = kernel_row(&law, 25, i, 12.max(i as usize * 2)).unwrap();
            for j in 1..=6u64 {
                let limit = qprocess_kernel(&law, &params, i, j).unwrap();
                assert!(
                    (row.get(j as usize).copied().unwrap_or(0.0) - limit).abs() < 1e-8,
                    "i = {i}, j = {j}"
                );
            }
        }
    }

    #[test]
    fn qprocess_rows_sum_to_one() {
        let law = quadratic_law();
        let params = law.derived_params().unwrap();
        for i in 1..=6u64 {
            let mut total = 0.0;
            for j in 1..=(2 * i) {
                total += qprocess_kernel(&law, &params, i, j).unwrap();
            }
            assert!((total - 1.0).abs() < 1e-12, "i = {i}: {total}");
        }
        // i = 1 row is the one-step law reweighted by j q^{j-1} / γ
        let row = law.transition_row(1, 2);
        for j in 1..=2u64 {
            let expected = row.probs[j as usize] * j as f64 * params.q.powi(j as i32 - 1)
                / params.gamma;
            assert!((qprocess_kernel(&law, &params, 1, j).unwrap() - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn iterate_log_derivative_identity_holds() {
        // f'(t,s) s / f(t,s) = l^t (1 + s R̄_t(s)) on (0, 1]
        let law = fig1_law();
        let params = law.derived_params().unwrap();
        let r = RFunction::new(&law, &params, 1e-13).unwrap();
        for t in 1..=6u32 {
            for i in 1..=10 {
                let s = i as f64 / 10.0;
                let (f, d1, _) = law.iterate_with_derivatives(t, s);
                let lhs = d1 * s / f;
                let rhs = 2f64.powi(t as i32) * (1.0 + s * r.log_derivative_truncated(s, t));
                assert!(
                    ((lhs - rhs) / rhs).abs() < 1e-8,
                    "t = {t}, s = {s}: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn conditional_mean_matches_truncated_log_derivative_route() {
        // E(Y(k) | T > t) = 1 + f(t-k,1) R̄_k(f(t-k,1)): the derivative
        // route and the truncated-product route must agree
        let law = fig1_law();
        let params = law.derived_params().unwrap();
        let r = RFunction::new(&law, &params, 1e-13).unwrap();
        let t = 7u32;
        for k in 0..=t {
            let (mean, _) = law.conditional_mean_var(k, t).unwrap();
            let y_mean = mean / 2f64.powi(k as i32);
            let x = law.iterate(t - k, 1.0).unwrap();
            let identity = 1.0 + x * r.log_derivative_truncated(x, k);
            assert!(
                ((y_mean - identity) / identity).abs() < 1e-10,
                "k = {k}: {y_mean} vs {identity}"
            );
        }
    }

    #[test]
    fn drift_profile_decreases_strictly_to_one() {
        let law = fig1_law();
        let params = law.derived_params().unwrap();
        let r = RFunction::new(&law, &params, 1e-13).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=12u32 {
            // work with the excess c(k) - 1: for k >= 8 it falls below
            // one ulp of 1 while staying strictly positive itself
            let excess = r.drift_excess(k).unwrap();
            assert!(excess > 0.0, "c({k}) - 1 = {excess}");
            assert!(excess < prev, "c({k}) did not decrease");
            prev = excess;
        }
        assert!(r.drift_excess(12).unwrap() < 1e-6);
        assert!((r.drift(0).unwrap() - 1.0 - r.drift_excess(0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn truncation_bound_dominates_the_observed_gap() {
        let law = fig1_law();
        let params = law.derived_params().unwrap();
        let r = RFunction::new(&law, &params, 1e-13).unwrap();
        let mut prev_delta = f64::INFINITY;
        for t in 1..=6u32 {
            let delta = r.delta(t);
            assert!(delta < prev_delta);
            prev_delta = delta;
            let bound = r.truncation_bound(t);
            for i in 0..=10 {
                let s = i as f64 / 10.0;
                let gap = r.log_derivative(s).unwrap() - r.log_derivative_truncated(s, t);
                // the adaptive cut of the full R̄ may sit a certified
                // ~tol*acc below a longer explicit truncation
                assert!(gap >= -1e-12, "negative gap at t = {t}, s = {s}");
                assert!(gap <= bound, "t = {t}, s = {s}: gap {gap} > bound {bound}");
            }
        }
        assert!(r.delta(40) < 1e-200);
    }

    #[test]
    fn conditional_variance_decays_at_the_predicted_rate() {
        // Var(Y(k) | T > t) ≤ C l^{-k} f(t-k, 1), with C fitted at the
        // endpoint where the normalized ratio peaks
        let law = fig1_law();
        let t = 7u32;
        let mut ratios = Vec::new();
        for k in 0..=t {
            let (_, var) = law.conditional_mean_var(k, t).unwrap();
            let y_var = var / 4f64.powi(k as i32);
            let rate = 2f64.powi(-(k as i32)) * law.iterate(t - k, 1.0).unwrap();
            ratios.push(y_var / rate);
        }
        let c = ratios[t as usize];
        for (k, ratio) in ratios.iter().enumerate() {
            assert!(*ratio <= c * (1.0 + 1e-12), "k = {k}: {ratio} > {c}");
        }
    }
}
