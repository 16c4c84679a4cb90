//! Correlation coefficients (Pearson, Spearman, Kendall tau-b) and
//! permutation tests for their significance.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMethod {
    Pearson,
    Spearman,
    Kendall,
}

impl CorrelationMethod {
    pub const ALL: [CorrelationMethod; 3] = [Self::Pearson, Self::Spearman, Self::Kendall];

    pub fn name(self) -> &'static str {
        match self {
            Self::Pearson => "pearson",
            Self::Spearman => "spearman",
            Self::Kendall => "kendall",
        }
    }

    pub fn coefficient(self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            Self::Pearson => pearson(x, y),
            Self::Spearman => spearman(x, y),
            Self::Kendall => kendall_tau(x, y),
        }
    }
}

impl std::str::FromStr for CorrelationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pearson" | "p" => Ok(Self::Pearson),
            "spearman" | "s" => Ok(Self::Spearman),
            "kendall" | "k" => Ok(Self::Kendall),
            other => Err(Error::Argument(format!("unknown correlation method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub method: CorrelationMethod,
    pub coefficient: f64,
    /// Two-sided, add-one estimator `(count + 1) / (P + 1)`; exact when
    /// `exhaustive` is set.
    pub p_value: f64,
    pub n_permutations: usize,
    pub seed: u64,
    pub exhaustive: bool,
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Argument(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Argument(format!("need at least 3 observations, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite observation".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("constant input has zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
        .map_err(|_| Error::Degenerate("a fully tied vector has no rank variance".into()))
}

/// Kendall tau-b: `(C - D) / sqrt((n0 - n1)(n0 - n2))` with tie corrections.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len();
    let (mut concordant, mut discordant, mut ties_x, mut ties_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].partial_cmp(&x[j]).expect("finite");
            let dy = y[i].partial_cmp(&y[j]).expect("finite");
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => {
                    ties_x += 1;
                    ties_y += 1;
                }
                (Equal, _) => ties_x += 1,
                (_, Equal) => ties_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = ((n0 - ties_x) as f64) * ((n0 - ties_y) as f64);
    if denom == 0.0 {
        return Err(Error::Degenerate("a fully tied vector has no Kendall pairs".into()));
    }
    Ok(((concordant - discordant) as f64 / denom.sqrt()).clamp(-1.0, 1.0))
}

/// Relative slack when comparing permuted statistics against the observed
/// one, so that ties in exact arithmetic count as ties.
const TIE_SLACK: f64 = 1e-12;

fn at_least_as_extreme(perm: f64, observed: f64) -> bool {
    perm.abs() >= observed.abs() * (1.0 - TIE_SLACK)
}

fn factorial_at_most(n: usize, cap: usize) -> Option<usize> {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k).filter(|&v| v <= cap))
}

/// Two-sided permutation test of `method(x, y)` against shuffles of `y`.
///
/// Permutation `k` draws from its own seeded stream, so the result does not
/// depend on evaluation order. When `n!` does not exceed
/// `n_permutations`, every permutation is enumerated instead and the exact
/// p-value is returned.
pub fn permutation_pvalue(
    x: &[f64],
    y: &[f64],
    method: CorrelationMethod,
    n_permutations: usize,
    seed: u64,
) -> Result<CorrelationResult> {
    if n_permutations < 99 {
        return Err(Error::Argument(format!("need at least 99 permutations, got {n_permutations}")));
    }
    let observed = method.coefficient(x, y)?;
    if let Some(total) = factorial_at_most(x.len(), n_permutations) {
        let count = exhaustive_count(x, y, method, observed)?;
        return Ok(CorrelationResult {
            method,
            coefficient: observed,
            p_value: count as f64 / total as f64,
            n_permutations: total,
            seed,
            exhaustive: true,
        });
    }
    let hits: Vec<bool> = (0..n_permutations)
        .into_par_iter()
        .map(|k| {
            let mut shuffled = y.to_vec();
            shuffled.shuffle(&mut rng::stream(seed, streams::PERMUTATION_BASE + k as u64));
            method.coefficient(x, &shuffled).map(|r| at_least_as_extreme(r, observed))
        })
        .collect::<Result<_>>()?;
    let count = hits.iter().filter(|&&h| h).count();
    Ok(CorrelationResult {
        method,
        coefficient: observed,
        p_value: (count + 1) as f64 / (n_permutations + 1) as f64,
        n_permutations,
        seed,
        exhaustive: false,
    })
}

/// Number of the `n!` orderings of `y` (identity included) at least as
/// extreme as `observed`, enumerated with Heap's algorithm.
fn exhaustive_count(x: &[f64], y: &[f64], method: CorrelationMethod, observed: f64) -> Result<usize> {
    let n = y.len();
    let mut perm = y.to_vec();
    let mut c = vec![0usize; n];
    let mut count = usize::from(at_least_as_extreme(method.coefficient(x, &perm)?, observed));
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            if at_least_as_extreme(method.coefficient(x, &perm)?, observed) {
                count += 1;
            }
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_over_ties() {
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn factorial_cap() {
        assert_eq!(factorial_at_most(5, 120), Some(120));
        assert_eq!(factorial_at_most(5, 119), None);
        assert_eq!(factorial_at_most(30, usize::MAX), None);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("Spearman".parse::<CorrelationMethod>().unwrap(), CorrelationMethod::Spearman);
        assert!("tau".parse::<CorrelationMethod>().is_err());
    }
}
