//! Two-sided Wilcoxon signed-rank test for paired samples.
//!
//! Zero differences are dropped, absolute differences are ranked with
//! mid-ranks on ties, and the statistic is the smaller signed-rank sum.
//! Small samples get an exact p-value over all sign assignments; larger
//! samples use the normal approximation with tie and continuity
//! corrections.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest effective sample size handled by the exact branch.
pub const EXACT_LIMIT: usize = 25;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignificanceResult {
    /// Smaller of the positive and negative rank sums.
    pub statistic: f64,
    pub p_value: f64,
    /// True when `p < 0.05`.
    pub significant: bool,
    /// Pairs remaining after zero differences are dropped.
    pub n_effective: usize,
}

/// Mid-ranks (1-based) of the values' ascending order.
fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share the averaged rank
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided p-value: the fraction of the `2^n` equally likely
/// sign assignments whose smaller rank sum is at most `w`.
///
/// Mid-ranks are half-integers, so doubling them gives an integer
/// rank-sum distribution computable by convolution.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    // counts[t] = number of subsets with doubled rank sum t
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for t in (r..=total).rev() {
            counts[t] += counts[t - r];
        }
    }
    let w2 = (2.0 * w).round() as usize;
    let favourable: u64 = (0..=total)
        .filter(|&t| t.min(total - t) <= w2)
        .map(|t| counts[t])
        .sum();
    favourable as f64 / 2f64.powi(ranks.len() as i32)
}

/// Normal-approximation two-sided p-value with tie and continuity
/// corrections.
fn approx_p(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    // tie correction: group sizes of equal ranks
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ranks"));
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w - mean + 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * normal.cdf(z)).clamp(0.0, 1.0)
}

/// Paired two-sided test of `a` against `b` at 95% confidence.
///
/// All-zero differences give `p = 1.0`, not an error.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<SignificanceResult> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "paired samples have different lengths ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("paired samples are empty"));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(SignificanceResult {
            statistic: 0.0,
            p_value: 1.0,
            significant: false,
            n_effective: 0,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = mid_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let w_minus: f64 = ranks.iter().sum::<f64>() - w_plus;
    let w = w_plus.min(w_minus);

    let p_value = if n <= EXACT_LIMIT {
        exact_p(&ranks, w)
    } else {
        approx_p(&ranks, w)
    };
    Ok(SignificanceResult {
        statistic: w,
        p_value,
        significant: p_value < 0.05,
        n_effective: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Literal enumeration oracle: every one of the 2^n sign vectors,
    /// with its own rank computation.
    fn enumeration_p(diffs: &[f64]) -> f64 {
        let n = diffs.len();
        let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
        // ranks by counting: 1 + #smaller + (#equal - 1) / 2
        let rank = |i: usize| -> f64 {
            let smaller = abs.iter().filter(|&&v| v < abs[i]).count();
            let equal = abs.iter().filter(|&&v| v == abs[i]).count();
            smaller as f64 + 1.0 + (equal as f64 - 1.0) / 2.0
        };
        let ranks: Vec<f64> = (0..n).map(rank).collect();
        let w_plus: f64 = (0..n).filter(|&i| diffs[i] > 0.0).map(|i| ranks[i]).sum();
        let w_minus: f64 = (0..n).filter(|&i| diffs[i] < 0.0).map(|i| ranks[i]).sum();
        let w_obs = w_plus.min(w_minus);

        let mut favourable = 0u64;
        for mask in 0u64..(1 << n) {
            let t_plus: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
            let t_minus: f64 = ranks.iter().sum::<f64>() - t_plus;
            if t_plus.min(t_minus) <= w_obs + 1e-9 {
                favourable += 1;
            }
        }
        favourable as f64 / 2f64.powi(n as i32)
    }

    #[test]
    fn identical_samples_are_not_significant() {
        let a = vec![0.5, 0.6, 0.7];
        let r = wilcoxon_signed_rank(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(!r.significant);
        assert_eq!(r.n_effective, 0);
    }

    #[test]
    fn ten_consistent_wins_hit_the_enumeration_floor() {
        let a: Vec<f64> = (0..10).map(|i| 0.9 + 0.001 * i as f64).collect();
        let b: Vec<f64> = (0..10).map(|i| 0.8 + 0.002 * i as f64).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 2.0 / 1024.0).abs() < 1e-12);
        assert!(r.significant);
    }

    #[test]
    fn exact_branch_matches_enumeration_oracle() {
        // deterministic pseudo-random paired samples, n = 8
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let a: Vec<f64> = (0..8).map(|_| next()).collect();
            let b: Vec<f64> = (0..8).map(|_| next()).collect();
            let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let r = wilcoxon_signed_rank(&a, &b).unwrap();
            let expect = enumeration_p(&diffs);
            assert!(
                (r.p_value - expect).abs() < 1e-12,
                "p {} vs oracle {expect}",
                r.p_value
            );
        }
    }

    #[test]
    fn exact_branch_handles_ties_in_magnitude() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![0.5, 2.5, 2.5, 3.5];
        // |diffs| = 0.5 everywhere: heavy ties
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        assert!((r.p_value - enumeration_p(&diffs)).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_and_empty_rejected() {
        assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]).is_err());
        assert!(wilcoxon_signed_rank(&[], &[]).is_err());
    }

    #[test]
    fn approx_branch_detects_a_strong_shift() {
        let a: Vec<f64> = (0..40).map(|i| 0.9 + 0.001 * (i % 7) as f64).collect();
        let b: Vec<f64> = (0..40).map(|i| 0.7 + 0.002 * (i % 5) as f64).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.n_effective, 40);
        assert!(r.p_value < 1e-6);
        assert!(r.significant);

        // and no shift stays insignificant
        let c: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 0.8 + 0.01 } else { 0.8 - 0.01 }).collect();
        let d = vec![0.8; 40];
        let r = wilcoxon_signed_rank(&c, &d).unwrap();
        assert!(!r.significant, "p = {}", r.p_value);
    }
}
