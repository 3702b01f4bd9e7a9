//! Small statistical utilities shared by the samplers and the experiment
//! harness: compensated summation, exactly mergeable moment accumulators,
//! integer histograms and a two-sample chi-square test.

use std::collections::BTreeMap;

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Neumaier-compensated sum. Used wherever a tiny residual of a
/// near-one sum is the quantity of interest.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// First and second moments of an integer-valued sample, kept as exact
/// integer sums. Merging accumulators is associative and commutative, so
/// a parallel reduction gives bit-identical results for any partitioning
/// of the sample across workers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MomentAccumulator {
    pub count: u64,
    pub sum: u128,
    pub sum_sq: u128,
}

impl MomentAccumulator {
    pub fn push(&mut self, value: u64) {
        self.count += 1;
        self.sum += value as u128;
        self.sum_sq += (value as u128) * (value as u128);
    }

    pub fn merge(mut self, other: Self) -> Self {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        self.sum as f64 / self.count as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        let n = self.count as f64;
        let mean = self.mean();
        // sum_sq - n*mean^2, evaluated with the integer sums to limit rounding
        let centered = self.sum_sq as f64 - n * mean * mean;
        (centered / (n - 1.0)).max(0.0)
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        (self.variance() / self.count as f64).sqrt()
    }
}

/// Counts of integer outcomes. The graveyard state is encoded as
/// [`Histogram::GRAVEYARD_KEY`] when a histogram ranges over the full
/// state space.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Histogram {
    pub counts: BTreeMap<u64, u64>,
    pub total: u64,
}

impl Histogram {
    pub const GRAVEYARD_KEY: u64 = u64::MAX;

    pub fn push(&mut self, key: u64) {
        *self.counts.entry(key).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn merge(mut self, other: Self) -> Self {
        for (k, v) in other.counts {
            *self.counts.entry(k).or_insert(0) += v;
        }
        self.total += other.total;
        self
    }

    pub fn count(&self, key: u64) -> u64 {
        self.counts.get(&key).copied().unwrap_or(0)
    }

    pub fn frequency(&self, key: u64) -> f64 {
        if self.total == 0 {
            return f64::NAN;
        }
        self.count(key) as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Two-sample chi-square homogeneity test. Cells are pooled in key order
/// until the expected count under the pooled estimate reaches
/// `min_expected` in both samples; a trailing underfull cell is merged
/// into its predecessor.
pub fn chi_square_two_sample(a: &Histogram, b: &Histogram, min_expected: f64) -> ChiSquareTest {
    let n_a = a.total as f64;
    let n_b = b.total as f64;
    let n = n_a + n_b;
    assert!(n_a > 0.0 && n_b > 0.0, "both samples must be non-empty");

    let mut keys: Vec<u64> = a.counts.keys().chain(b.counts.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();

    // pooled cells as (count_a, count_b)
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0f64, 0.0f64);
    for key in keys {
        acc.0 += a.count(key) as f64;
        acc.1 += b.count(key) as f64;
        let pooled = (acc.0 + acc.1) / n;
        if pooled * n_a >= min_expected && pooled * n_b >= min_expected {
            cells.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if acc.0 + acc.1 > 0.0 {
        if let Some(last) = cells.last_mut() {
            last.0 += acc.0;
            last.1 += acc.1;
        } else {
            cells.push(acc);
        }
    }

    if cells.len() < 2 {
        // one pooled cell carries no information; the samples are trivially alike
        return ChiSquareTest {
            statistic: 0.0,
            dof: 0,
            p_value: 1.0,
        };
    }

    let mut statistic = 0.0;
    for &(ca, cb) in &cells {
        let pooled = (ca + cb) / n;
        let ea = pooled * n_a;
        let eb = pooled * n_b;
        statistic += (ca - ea) * (ca - ea) / ea + (cb - eb) * (cb - eb) / eb;
    }
    let dof = cells.len() - 1;
    let dist = ChiSquared::new(dof as f64).expect("dof >= 1");
    ChiSquareTest {
        statistic,
        dof,
        p_value: dist.sf(statistic),
    }
}
