//! Defective reproduction laws with finite support.
//!
//! A [`DefectivePgf`] stores an offspring distribution `(p_0, ..., p_D)`
//! whose total mass may fall short of one; the missing mass
//! `ε = 1 - Σ p_k` is the per-particle probability of sending the whole
//! process to the graveyard. The module provides generating-function
//! iteration in three numerically complementary coordinate systems:
//!
//! * plain iteration of `f(t, s)` on `[0, 1]`,
//! * iteration of `f(t, s) - q` in coordinates shifted to the extinction
//!   probability `q`, which stays meaningful long after `f(t, s)` has
//!   collapsed onto `q` at double precision,
//! * iteration of `ln f(t, s)` for laws with `p_0 = 0`, whose iterates
//!   decay doubly exponentially.
//!
//! Differences of iterates (`f(t, x) - f(t, y)`) are propagated through
//! the recursion with divided differences instead of being formed by
//! subtraction, so survival probabilities and conditional laws remain
//! accurate at times where the two iterates agree to hundreds of ulps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series::TruncatedSeries;
use crate::stats::compensated_sum;

#[derive(Debug, Error, PartialEq)]
pub enum PgfError {
    #[error("offspring distribution must have at least one entry")]
    EmptyPmf,
    #[error("offspring probability at {index} is negative: {value}")]
    NegativeMass { index: usize, value: f64 },
    #[error("offspring probabilities sum to {total} > 1")]
    MassExceedsOne { total: f64 },
    #[error("constant generating function describes no process")]
    ConstantLaw,
    #[error("argument {0} outside [0, 1]")]
    DomainError(f64),
    #[error("tolerance must be positive, got {0}")]
    NonPositiveTolerance(f64),
    #[error("fixed-point solver stalled with residual {residual}")]
    RootNotConverged { residual: f64 },
    #[error("conditioning event has vanishing probability")]
    VanishingConditioning,
    #[error("generation index k = {k} exceeds horizon t = {t}")]
    GenerationPastHorizon { k: u32, t: u32 },
    #[error("operation requires q = 0 (no mass at zero offspring)")]
    ZeroExtinctionRequired,
}

/// Finite-support offspring law, possibly defective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPgf", into = "RawPgf")]
pub struct DefectivePgf {
    pmf: Vec<f64>,
    defect: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPgf {
    pmf: Vec<f64>,
}

impl TryFrom<RawPgf> for DefectivePgf {
    type Error = PgfError;
    fn try_from(raw: RawPgf) -> Result<Self, PgfError> {
        DefectivePgf::new(raw.pmf)
    }
}

impl From<DefectivePgf> for RawPgf {
    fn from(pgf: DefectivePgf) -> RawPgf {
        RawPgf { pmf: pgf.pmf }
    }
}

/// Cached quantities derived from one law: extinction probability `q`,
/// its multiplier `gamma = f'(q)`, the minimal offspring count, the mean,
/// and the Taylor coefficients of `f(q + u) - q` used by the shifted
/// iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedParams {
    pub q: f64,
    pub gamma: f64,
    pub min_offspring: usize,
    pub mean: f64,
    pub p_min: f64,
    /// True for proper (`ε = 0`) laws kept as classical regression cases.
    pub degenerate: bool,
    shifted: Vec<f64>,
}

impl DerivedParams {
    /// `a_t = (l^t - 1) / (l - 1)`, the exponent of `p_l` in the
    /// probability of the minimal trajectory. Only meaningful for
    /// minimal offspring `l >= 2`.
    pub fn a_t(&self, t: u32) -> f64 {
        assert!(self.min_offspring >= 2, "a_t requires l >= 2");
        let l = self.min_offspring as f64;
        (l.powi(t as i32) - 1.0) / (l - 1.0)
    }

    /// `ln P(Z(t) = l^t)`, the log-probability of the minimal trajectory,
    /// computed in log space because the exponent grows geometrically.
    pub fn log_pi(&self, t: u32) -> f64 {
        if t == 0 {
            return 0.0;
        }
        if self.min_offspring >= 2 {
            self.a_t(t) * self.p_min.ln()
        } else {
            debug_assert!(
                self.gamma > 0.0,
                "gamma = 0 with minimal offspring <= 1 cannot occur"
            );
            t as f64 * self.gamma.ln()
        }
    }
}

/// One-step transition probabilities out of state `i`: `probs[j]` is
/// `P(Z(t+1) = j | Z(t) = i)` and `defect_mass` the jump probability to
/// the graveyard, `1 - (1 - ε)^i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRow {
    pub source: u64,
    pub probs: Vec<f64>,
    pub defect_mass: f64,
}

/// The three absorption probabilities after `t` steps:
/// `P(T > t)`, `P(t < T_0 < ∞)` and `P(t < T_Δ < ∞)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsorptionSplit {
    pub survival: f64,
    pub extinction_after: f64,
    pub killing_after: f64,
}

/// A pair of iterates together with their stably propagated difference.
#[derive(Debug, Clone, Copy)]
pub struct PairIterate {
    pub upper: f64,
    pub lower: f64,
    pub diff: f64,
}

impl DefectivePgf {
    /// Validates and normalizes an offspring law. Trailing zero
    /// probabilities are stripped; a constant generating function is
    /// rejected.
    pub fn new(mut pmf: Vec<f64>) -> Result<Self, PgfError> {
        if pmf.is_empty() {
            return Err(PgfError::EmptyPmf);
        }
        for (index, &value) in pmf.iter().enumerate() {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(PgfError::NegativeMass { index, value });
            }
        }
        while pmf.len() > 1 && *pmf.last().unwrap() == 0.0 {
            pmf.pop();
        }
        if pmf.len() < 2 {
            return Err(PgfError::ConstantLaw);
        }
        let total = compensated_sum(&pmf);
        if total > 1.0 + 1e-12 {
            return Err(PgfError::MassExceedsOne { total });
        }
        let defect = (1.0 - total).max(0.0);
        Ok(Self { pmf, defect })
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    /// Maximal offspring count `D`.
    pub fn max_offspring(&self) -> usize {
        self.pmf.len() - 1
    }

    /// Minimal offspring count with positive probability.
    pub fn min_offspring(&self) -> usize {
        self.pmf.iter().position(|&p| p > 0.0).unwrap_or(0)
    }

    /// `ε = 1 - f(1)`.
    pub fn defect(&self) -> f64 {
        self.defect
    }

    pub fn is_defective(&self) -> bool {
        self.defect > 0.0
    }

    /// `f(1) = 1 - ε`, the total offspring mass.
    pub fn total_mass(&self) -> f64 {
        1.0 - self.defect
    }

    /// `m = f'(1)`.
    pub fn mean(&self) -> f64 {
        self.pmf
            .iter()
            .enumerate()
            .map(|(k, &p)| k as f64 * p)
            .sum()
    }

    fn horner(&self, s: f64) -> f64 {
        self.pmf.iter().rev().fold(0.0, |acc, &p| acc * s + p)
    }

    /// `f'(s)`.
    pub fn derivative_at(&self, s: f64) -> f64 {
        self.pmf
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, &p)| acc * s + k as f64 * p)
    }

    /// `f''(s)`.
    pub fn second_derivative_at(&self, s: f64) -> f64 {
        self.pmf
            .iter()
            .enumerate()
            .skip(2)
            .rev()
            .fold(0.0, |acc, (k, &p)| acc * s + (k * (k - 1)) as f64 * p)
    }

    /// `f(s) = Σ p_k s^k` for `s` in `[0, 1]`.
    pub fn eval(&self, s: f64) -> Result<f64, PgfError> {
        self.check_domain(s)?;
        Ok(self.horner(s))
    }

    /// The `t`-th functional iterate `f(t, s)`, with `f(0, s) = s`.
    pub fn iterate(&self, t: u32, s: f64) -> Result<f64, PgfError> {
        self.check_domain(s)?;
        let mut v = s;
        for _ in 0..t {
            v = self.horner(v);
        }
        Ok(v)
    }

    /// The law embedded as a truncated series.
    pub fn to_series(&self, degree: usize) -> TruncatedSeries {
        let mut coeffs = vec![0.0; degree + 1];
        for (k, &p) in self.pmf.iter().enumerate() {
            if k <= degree {
                coeffs[k] = p;
            }
        }
        TruncatedSeries::from_coeffs(coeffs)
    }

    /// Coefficient-level iteration: coefficient `j` of the result is
    /// `P(Z(t) = j)` for `j <= degree`.
    pub fn iterate_series(&self, t: u32, degree: usize) -> TruncatedSeries {
        let f = self.to_series(degree);
        let mut acc = TruncatedSeries::identity(degree);
        for _ in 0..t {
            acc = f.compose(&acc).expect("iterates stay inside the unit disc");
        }
        acc
    }

    /// Extinction probability and companions. `q` is the smallest
    /// non-negative root of `f(s) = s`; for proper laws with mean at most
    /// one the root is `q = 1` and the result is flagged degenerate.
    pub fn derived_params(&self) -> Result<DerivedParams, PgfError> {
        self.derived_params_with_tol(1e-14)
    }

    pub fn derived_params_with_tol(&self, tol: f64) -> Result<DerivedParams, PgfError> {
        if !(tol > 0.0) {
            return Err(PgfError::NonPositiveTolerance(tol));
        }
        let l = self.min_offspring();
        let mean = self.mean();
        let q = if l >= 1 {
            0.0
        } else if self.defect == 0.0 && mean <= 1.0 {
            1.0
        } else {
            self.solve_extinction(tol)?
        };
        let shifted = self.shifted_coeffs(q);
        Ok(DerivedParams {
            q,
            gamma: shifted[1],
            min_offspring: l,
            mean,
            p_min: self.pmf[l],
            degenerate: !self.is_defective(),
            shifted,
        })
    }

    fn solve_extinction(&self, tol: f64) -> Result<f64, PgfError> {
        let g = |s: f64| self.horner(s) - s;
        // find an upper bracket with g < 0; for defective laws s = 1 works
        let mut hi = 1.0;
        if self.defect == 0.0 {
            let mut k = 1;
            while g(hi) >= 0.0 {
                hi = 1.0 - 0.5f64.powi(k);
                k += 1;
                if k > 60 {
                    return Err(PgfError::RootNotConverged { residual: g(1.0) });
                }
            }
        }
        let mut lo = 0.0;
        for _ in 0..120 {
            let mid = 0.5 * (lo + hi);
            if g(mid) >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        // Newton polish from the non-negative side
        let mut q = lo;
        for _ in 0..8 {
            let denom = self.derivative_at(q) - 1.0;
            if denom == 0.0 {
                break;
            }
            let step = g(q) / denom;
            let next = q - step;
            if !(0.0..=1.0).contains(&next) {
                break;
            }
            q = next;
            if step.abs() < f64::EPSILON * q.abs() {
                break;
            }
        }
        let residual = g(q).abs();
        if residual > tol {
            return Err(PgfError::RootNotConverged { residual });
        }
        Ok(q)
    }

    /// Taylor coefficients of `f(q + u) - q` in powers of `u`, with the
    /// constant term (the solver residual) forced to zero so that `u = 0`
    /// is an exact fixed point of the shifted map.
    fn shifted_coeffs(&self, q: f64) -> Vec<f64> {
        let d = self.max_offspring();
        let mut binom = vec![0.0f64; d + 1];
        let mut coeffs = vec![0.0f64; d + 1];
        for (j, &p) in self.pmf.iter().enumerate() {
            // update row of binomial coefficients in place: binom[k] = C(j, k)
            binom[j] = 1.0;
            for k in (1..j).rev() {
                binom[k] += binom[k - 1];
            }
            if p == 0.0 {
                continue;
            }
            let mut qpow = 1.0;
            for k in (1..=j).rev() {
                coeffs[k] += p * binom[k] * qpow;
                qpow *= q;
            }
        }
        coeffs[0] = 0.0;
        coeffs
    }

    /// `f(t, s) - q` iterated entirely in the shifted coordinate
    /// `u = s - q`. Stays accurate when the iterate is closer to `q`
    /// than one ulp of `q` itself.
    pub fn iterate_shifted(&self, params: &DerivedParams, t: u32, s: f64) -> f64 {
        let mut u = s - params.q;
        for _ in 0..t {
            u = params
                .shifted
                .iter()
                .skip(1)
                .rev()
                .fold(0.0, |acc, &c| acc * u + c)
                * u;
        }
        u
    }

    /// `ln f(t, s)` for laws with `p_0 = 0`, iterated in log space. The
    /// iterates decay like `l^t`-th powers, far below the smallest
    /// positive double for moderate `t`.
    pub fn iterate_log(&self, t: u32, s: f64) -> Result<f64, PgfError> {
        self.check_domain(s)?;
        let l = self.min_offspring();
        if l == 0 {
            return Err(PgfError::ZeroExtinctionRequired);
        }
        let mut y = s.ln();
        for _ in 0..t {
            // f(x) = x^l * (p_l + p_{l+1} x + ...), so
            // ln f = l ln x + ln(tail(x))
            let x = y.exp();
            let tail = self.pmf[l..].iter().rev().fold(0.0, |acc, &p| acc * x + p);
            y = l as f64 * y + tail.ln();
        }
        Ok(y)
    }

    /// Divided difference `(f(a) - f(b)) / (a - b)`, evaluated without
    /// cancellation.
    pub(crate) fn divided_difference(&self, a: f64, b: f64) -> f64 {
        let mut acc = 0.0;
        let mut h = 0.0; // (a^k - b^k)/(a - b)
        let mut bpow = 1.0; // b^k
        for &p in &self.pmf {
            acc += p * h;
            h = a * h + bpow;
            bpow *= b;
        }
        acc
    }

    /// Iterates the pair `(x, y)` while propagating `f(t, x) - f(t, y)`
    /// through divided differences.
    pub fn iterate_pair_diff(&self, t: u32, x: f64, y: f64) -> PairIterate {
        self.iterate_pair_seeded(t, x, y, x - y)
    }

    /// Same as [`Self::iterate_pair_diff`] with an externally supplied
    /// seed difference (used when `x - y` itself is the stably computed
    /// difference of two earlier iterates).
    pub(crate) fn iterate_pair_seeded(
        &self,
        t: u32,
        mut x: f64,
        mut y: f64,
        mut diff: f64,
    ) -> PairIterate {
        for _ in 0..t {
            diff *= self.divided_difference(x, y);
            x = self.horner(x);
            y = self.horner(y);
        }
        PairIterate {
            upper: x,
            lower: y,
            diff,
        }
    }

    /// `(f(t, s), f'(t, s), f''(t, s))` by chain-rule recursion; exact up
    /// to rounding since the iterates of a polynomial are polynomials.
    pub fn iterate_with_derivatives(&self, t: u32, s: f64) -> (f64, f64, f64) {
        let mut v = s;
        let mut d1 = 1.0;
        let mut d2 = 0.0;
        for _ in 0..t {
            let fp = self.derivative_at(v);
            let fpp = self.second_derivative_at(v);
            d2 = fpp * d1 * d1 + fp * d2;
            d1 *= fp;
            v = self.horner(v);
        }
        (v, d1, d2)
    }

    /// `P(T > t)`, `P(t < T_0 < ∞)`, `P(t < T_Δ < ∞)` — all three
    /// computed through stable differences.
    pub fn survival_split(&self, params: &DerivedParams, t: u32) -> AbsorptionSplit {
        let survival = self.iterate_pair_diff(t, 1.0, 0.0).diff;
        let killing_after = self.iterate_shifted(params, t, 1.0);
        let extinction_after = -self.iterate_shifted(params, t, 0.0);
        AbsorptionSplit {
            survival,
            extinction_after,
            killing_after,
        }
    }

    /// `E(s^{Z(k)} | T > t)` for `0 <= k <= t`.
    pub fn conditional_pgf(&self, k: u32, t: u32, s: f64) -> Result<f64, PgfError> {
        self.check_domain(s)?;
        if k > t {
            return Err(PgfError::GenerationPastHorizon { k, t });
        }
        let denom = self.iterate_pair_diff(t, 1.0, 0.0);
        if denom.diff <= 0.0 {
            return Err(PgfError::VanishingConditioning);
        }
        let tail = self.iterate_pair_diff(t - k, 1.0, 0.0);
        let numer = self.iterate_pair_seeded(k, s * tail.upper, s * tail.lower, s * tail.diff);
        Ok(numer.diff / denom.diff)
    }

    /// Conditional mean and variance of `Z(k)` given `T > t`, from exact
    /// derivatives of the iterates.
    pub fn conditional_mean_var(&self, k: u32, t: u32) -> Result<(f64, f64), PgfError> {
        if k > t {
            return Err(PgfError::GenerationPastHorizon { k, t });
        }
        let denom = self.iterate_pair_diff(t, 1.0, 0.0);
        if denom.diff <= 0.0 {
            return Err(PgfError::VanishingConditioning);
        }
        let tail = self.iterate_pair_diff(t - k, 1.0, 0.0);
        let (_, du, ddu) = self.iterate_with_derivatives(k, tail.upper);
        let (_, dl, ddl) = self.iterate_with_derivatives(k, tail.lower);
        let mean = (du * tail.upper - dl * tail.lower) / denom.diff;
        // second factorial moment E(Z(k)(Z(k)-1) | T > t)
        let m2 = (ddu * tail.upper * tail.upper - ddl * tail.lower * tail.lower) / denom.diff;
        let var = m2 + mean - mean * mean;
        Ok((mean, var))
    }

    /// Transition row out of state `i`: the coefficients of `f(s)^i`
    /// truncated at `degree`, plus the graveyard mass.
    pub fn transition_row(&self, i: u64, degree: usize) -> TransitionRow {
        assert!(i >= 1, "transition rows start from state 1");
        let base = self.to_series(degree);
        let mut power = TruncatedSeries::constant(1.0, degree);
        for _ in 0..i {
            power = power.mul(&base).expect("equal degrees");
        }
        let defect_mass = if self.defect == 0.0 {
            0.0
        } else {
            -(i as f64 * (-self.defect).ln_1p()).exp_m1()
        };
        TransitionRow {
            source: i,
            probs: power.into_coeffs(),
            defect_mass,
        }
    }

    fn check_domain(&self, s: f64) -> Result<(), PgfError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(PgfError::DomainError(s));
        }
        Ok(())
    }
}

/// `(a^m - b^m) / (a - b) = Σ_{i<m} a^i b^{m-1-i}`, the cancellation-free
/// companion of the power difference.
pub(crate) fn pow_sum(a: f64, b: f64, m: u64) -> f64 {
    let mut h = 0.0;
    let mut bpow = 1.0;
    for _ in 0..m {
        h = a * h + bpow;
        bpow *= b;
    }
    h
}
