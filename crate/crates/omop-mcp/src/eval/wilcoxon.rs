//! Wilcoxon signed-rank test for paired scores.
//!
//! Zero differences are dropped (classic Wilcoxon treatment), ties in the
//! absolute differences receive average ranks, and the reported statistic is
//! `W = min(W+, W-)`. Two p-value routes are provided:
//!
//! - an exact route that computes the full null distribution of the positive
//!   rank sum over all sign assignments (ranks are held in doubled integer
//!   form so tied average ranks stay exact), used for n ≤ 25;
//! - a normal approximation with tie-corrected variance and continuity
//!   correction, used for larger n.
//!
//! Both effect-size conventions are always reported side by side: `|z|/sqrt(n)`
//! and the matched rank-biserial `(W+ - W-)/(W+ + W-)`. Published studies
//! rarely say which convention an `r` was computed under, so neither is
//! silently chosen.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

/// Largest n for which the exact null distribution is computed by default.
pub const EXACT_N_LIMIT: usize = 25;

/// Which p-value route to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Exact for n ≤ [`EXACT_N_LIMIT`], normal approximation above.
    Auto,
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WilcoxonResult {
    /// Pairs remaining after zero-difference removal.
    pub n_pairs: usize,
    /// min(W+, W-).
    pub w_statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Signed z from the tie-corrected normal approximation (positive when
    /// the first sample dominates).
    pub z_value: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Route that produced `p_value`.
    pub p_method: Method,
    /// Effect size convention A: |z| / sqrt(n_pairs).
    pub effect_r_z: f64,
    /// Effect size convention B: matched rank-biserial correlation.
    pub effect_r_rb: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WilcoxonError {
    #[error("paired inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("all paired differences are zero; the test is undefined")]
    DegenerateInput,
    #[error("inputs must be finite numbers")]
    NonFiniteInput,
}

/// Runs the test with [`Method::Auto`] route selection.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, WilcoxonError> {
    wilcoxon_signed_rank_with(a, b, Method::Auto)
}

pub fn wilcoxon_signed_rank_with(
    a: &[f64],
    b: &[f64],
    method: Method,
) -> Result<WilcoxonResult, WilcoxonError> {
    if a.len() != b.len() {
        return Err(WilcoxonError::LengthMismatch(a.len(), b.len()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(WilcoxonError::NonFiniteInput);
    }

    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(WilcoxonError::DegenerateInput);
    }
    let n = diffs.len();

    // Ranks of |d| with average ranks for ties, doubled so they stay integer.
    let doubled_ranks = doubled_average_ranks(&diffs);
    let total2: u64 = (n as u64) * (n as u64 + 1);
    let w_plus2: u64 =
        diffs.iter().zip(&doubled_ranks).filter(|(d, _)| **d > 0.0).map(|(_, r2)| *r2).sum();
    let w_minus2 = total2 - w_plus2;
    let w2 = w_plus2.min(w_minus2);

    let w_plus = w_plus2 as f64 / 2.0;
    let w_minus = w_minus2 as f64 / 2.0;
    let w_statistic = w2 as f64 / 2.0;

    // Tie-corrected variance: n(n+1)(2n+1)/24 - sum(t^3 - t)/48.
    let nf = n as f64;
    let tie_term: f64 =
        tie_group_sizes(&diffs).iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let mean = nf * (nf + 1.0) / 4.0;
    let variance = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let sd = variance.sqrt();

    // Signed z from W+ with continuity correction toward the mean.
    let correction = 0.5 * (w_plus - mean).signum();
    let z_value = if sd > 0.0 { (w_plus - mean - correction) / sd } else { 0.0 };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let approx_p = (2.0 * (1.0 - normal.cdf(z_value.abs()))).clamp(0.0, 1.0);

    let use_exact = match method {
        Method::Exact => true,
        Method::NormalApprox => false,
        Method::Auto => n <= EXACT_N_LIMIT,
    };
    let (p_value, p_method) = if use_exact {
        (exact_two_sided_p(&doubled_ranks, w2, total2), Method::Exact)
    } else {
        (approx_p, Method::NormalApprox)
    };

    Ok(WilcoxonResult {
        n_pairs: n,
        w_statistic,
        w_plus,
        w_minus,
        z_value,
        p_value,
        p_method,
        effect_r_z: z_value.abs() / nf.sqrt(),
        effect_r_rb: (w_plus - w_minus) / (w_plus + w_minus),
    })
}

/// Average ranks of |d|, each doubled so ties of the form k + 1/2 are exact
/// integers.
fn doubled_average_ranks(diffs: &[f64]) -> Vec<u64> {
    let n = diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).expect("finite"));

    let mut ranks2 = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // Positions i..=j (0-based) share the average of ranks i+1..=j+1,
        // which doubled is (i+1) + (j+1).
        let doubled = (i + 1 + j + 1) as u64;
        for &idx in &order[i..=j] {
            ranks2[idx] = doubled;
        }
        i = j + 1;
    }
    ranks2
}

fn tie_group_sizes(diffs: &[f64]) -> Vec<u64> {
    let mut magnitudes: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    magnitudes.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
    let mut sizes = Vec::new();
    let mut i = 0;
    while i < magnitudes.len() {
        let mut j = i;
        while j + 1 < magnitudes.len() && magnitudes[j + 1] == magnitudes[i] {
            j += 1;
        }
        sizes.push((j - i + 1) as u64);
        i = j + 1;
    }
    sizes
}

/// Exact two-sided p: probability mass of sign assignments whose positive
/// rank sum falls at or beyond the observed `min(W+, W-)` on either tail.
///
/// The distribution of the doubled positive rank sum is built by convolution
/// over the doubled ranks; this enumerates the same 2^n assignment space as a
/// direct sweep without materializing it.
fn exact_two_sided_p(doubled_ranks: &[u64], w2: u64, total2: u64) -> f64 {
    let mut counts = vec![0u64; total2 as usize + 1];
    counts[0] = 1;
    let mut reached = 0usize;
    for &r2 in doubled_ranks {
        let r2 = r2 as usize;
        reached += r2;
        for s in (0..=reached).rev() {
            if s >= r2 && counts[s - r2] > 0 {
                counts[s] += counts[s - r2];
            }
        }
    }

    let upper_from = total2 - w2;
    let mut extreme: u64 = 0;
    for (s, &count) in counts.iter().enumerate() {
        let s = s as u64;
        if s <= w2 || s >= upper_from {
            extreme += count;
        }
    }
    let total_assignments = 2f64.powi(doubled_ranks.len() as i32);
    (extreme as f64 / total_assignments).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_shifted_pairs() {
        // a - b is negative for every pair, with a tied block of four 1s.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 3.0, 4.0, 5.0, 7.0];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.w_plus, 0.0);
        assert_eq!(r.w_statistic, 0.0);
        assert_eq!(r.p_method, Method::Exact);
        assert!((r.p_value - 2.0 / 32.0).abs() < 1e-12, "p={}", r.p_value);
        assert_eq!(r.effect_r_rb, -1.0);
        assert!(r.z_value < 0.0);
    }

    #[test]
    fn identical_inputs_are_degenerate() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(wilcoxon_signed_rank(&a, &a), Err(WilcoxonError::DegenerateInput));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert_eq!(
            wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]),
            Err(WilcoxonError::LengthMismatch(1, 2))
        );
    }

    #[test]
    fn zero_differences_are_dropped() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 9.0];
        let b = [2.0, 3.0, 4.0, 5.0, 7.0, 9.0];
        let with_zero = wilcoxon_signed_rank(&a, &b).unwrap();
        let without = wilcoxon_signed_rank(&a[..5], &b[..5]).unwrap();
        assert_eq!(with_zero, without);
        assert_eq!(with_zero.n_pairs, 5);
    }

    #[test]
    fn swapping_inputs_preserves_two_sided_p() {
        let a = [1.0, 5.0, 2.0, 8.0, 3.0, 9.0, 4.0];
        let b = [2.0, 3.0, 4.0, 5.0, 7.0, 1.0, 8.0];
        let ab = wilcoxon_signed_rank(&a, &b).unwrap();
        let ba = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(ab.p_value, ba.p_value);
        assert_eq!(ab.w_statistic, ba.w_statistic);
        assert_eq!(ab.effect_r_rb, -ba.effect_r_rb);
        assert_eq!(ab.z_value, -ba.z_value);
    }

    #[test]
    fn rank_biserial_stays_in_unit_interval() {
        let a = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let b = [2.0, 7.0, 1.0, 8.0, 2.0, 8.0, 1.0, 8.0];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(r.effect_r_rb.abs() <= 1.0);
        assert!((0.0..=1.0).contains(&r.p_value));
    }

    #[test]
    fn forced_approximation_tracks_exact_at_n20() {
        // Deterministic mildly-shifted input; the acceptance suite fuzzes this.
        let a: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + ((i % 3) as f64) - 0.8).collect();
        let exact = wilcoxon_signed_rank_with(&a, &b, Method::Exact).unwrap();
        let approx = wilcoxon_signed_rank_with(&a, &b, Method::NormalApprox).unwrap();
        assert!((exact.p_value - approx.p_value).abs() < 0.02);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        assert_eq!(
            wilcoxon_signed_rank(&[f64::NAN, 1.0], &[0.0, 0.0]),
            Err(WilcoxonError::NonFiniteInput)
        );
    }
}
