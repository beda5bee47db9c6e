//! Paired significance tests over per-run error rates.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub statistic: f64,
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
    pub mean_difference: f64,
    /// Zero-variance differences: statistic undefined, `p_value` set to 1.
    pub degenerate: bool,
}

/// One-sample t-test of `d` against mean 0.
pub fn t_test(d: &[f64]) -> Result<TTest> {
    if d.len() < 2 {
        return Err(Error::TooFewSamples { min: 2, got: d.len() });
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("differences must be finite"));
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    if var == 0.0 {
        return Ok(TTest {
            statistic: if mean == 0.0 { 0.0 } else { f64::NAN },
            df,
            p_value: 1.0,
            mean_difference: mean,
            degenerate: true,
        });
    }
    let statistic = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
    let p_value = (2.0 * dist.sf(statistic.abs())).min(1.0);
    Ok(TTest {
        statistic,
        df,
        p_value,
        mean_difference: mean,
        degenerate: false,
    })
}

/// Paired t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    t_test(&differences(a, b)?)
}

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::dims(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    pub w_plus: f64,
    pub w_minus: f64,
    /// Nonzero differences actually ranked.
    pub n: usize,
    /// Two-sided.
    pub p_value: f64,
    /// Exact null distribution (otherwise normal approximation).
    pub exact: bool,
    /// No nonzero differences: `p_value` set to 1.
    pub degenerate: bool,
}

pub const EXACT_WILCOXON_MAX_N: usize = 25;

/// Average ranks of `|d|` (1-based); ties share the mean of their ranks.
pub fn signed_ranks(d: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && d[idx[end]].abs() == d[idx[start]].abs() {
            end += 1;
        }
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Wilcoxon signed-rank test of `d` against a symmetric null around 0.
/// Zero differences are dropped.
pub fn wilcoxon_signed_rank(d: &[f64]) -> Result<Wilcoxon> {
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("differences must be finite"));
    }
    let nz: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Ok(Wilcoxon {
            w_plus: 0.0,
            w_minus: 0.0,
            n: 0,
            p_value: 1.0,
            exact: true,
            degenerate: true,
        });
    }
    let ranks = signed_ranks(&nz);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let (p_value, exact) = if n <= EXACT_WILCOXON_MAX_N {
        (exact_p_value(&ranks, w_plus), true)
    } else {
        (normal_p_value(&ranks, w_plus), false)
    };
    Ok(Wilcoxon {
        w_plus,
        w_minus,
        n,
        p_value,
        exact,
        degenerate: false,
    })
}

pub fn paired_wilcoxon(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    wilcoxon_signed_rank(&differences(a, b)?)
}

// Counts subsets of the doubled (hence integral) ranks by sum.
fn exact_p_value(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w = (2.0 * w_plus).round() as usize;
    let total = (1u64 << ranks.len()) as f64;
    let lower: u64 = counts[..=w].iter().sum();
    let upper: u64 = counts[w..].iter().sum();
    (2.0 * lower.min(upper) as f64 / total).min(1.0)
}

fn normal_p_value(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * std_normal.sf(z)).min(1.0)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Two-sided p for integer `df` from the closed-form series for the
    /// Student-t CDF (Abramowitz & Stegun 26.7.3-26.7.4).
    fn t_p_reference(t: f64, df: u32) -> f64 {
        let theta = (t.abs() / (df as f64).sqrt()).atan();
        let (s, c) = theta.sin_cos();
        let c2 = c * c;
        let a = if df % 2 == 0 {
            let mut term = 1.0;
            let mut sum = 1.0;
            let mut k = 2;
            while k < df {
                term *= c2 * (k - 1) as f64 / k as f64;
                sum += term;
                k += 2;
            }
            s * sum
        } else {
            let mut inner = 0.0;
            if df > 1 {
                let mut term = 1.0;
                inner = 1.0;
                let mut k = 3;
                while k < df {
                    term *= c2 * (k - 1) as f64 / k as f64;
                    inner += term;
                    k += 2;
                }
            }
            2.0 / std::f64::consts::PI * (theta + s * c * inner)
        };
        1.0 - a
    }

    /// Two-sided p by enumerating all sign assignments of the ranks.
    fn wilcoxon_enumerated(d: &[f64]) -> f64 {
        let nz: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
        let r = signed_ranks(&nz);
        let w: f64 = nz.iter().zip(&r).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
        let n = r.len();
        let (mut lo, mut hi) = (0u64, 0u64);
        for bits in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|i| bits >> i & 1 == 1).map(|i| r[i]).sum();
            if s <= w + 1e-9 {
                lo += 1;
            }
            if s >= w - 1e-9 {
                hi += 1;
            }
        }
        (2.0 * lo.min(hi) as f64 / (1u64 << n) as f64).min(1.0)
    }

    #[test]
    fn t_fixture() {
        let r = t_test(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((r.statistic - 18f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.df, 4.0);
        assert!((r.p_value - t_p_reference(r.statistic, 4)).abs() < 1e-10);
        assert!((r.p_value - 0.0132).abs() < 5e-5, "{}", r.p_value);
        let p = paired_t_test(&[2.0, 4.0, 6.0, 8.0, 10.0], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(p.statistic, r.statistic);
    }

    #[test]
    fn t_reference_sanity() {
        // df = 1 is Cauchy: two-sided p(1) = 1/2; df = 2: p(t) = 1 - t / sqrt(2 + t^2).
        assert!((t_p_reference(1.0, 1) - 0.5).abs() < 1e-15);
        assert!((t_p_reference(1.5, 2) - (1.0 - 1.5 / (2.0f64 + 2.25).sqrt())).abs() < 1e-15);
    }

    #[test]
    fn t_degenerate() {
        let r = t_test(&[0.0, 0.0, 0.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
        let r = paired_t_test(&[0.1, 0.2], &[0.1, 0.2]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
        assert!(t_test(&[1.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn wilcoxon_fixture() {
        let d = [1.0, 2.0, 3.0, 4.0, 5.0, -1.0];
        assert_eq!(signed_ranks(&d), vec![1.5, 3.0, 4.0, 5.0, 6.0, 1.5]);
        let w = wilcoxon_signed_rank(&d).unwrap();
        assert_eq!(w.w_plus, 19.5);
        assert_eq!(w.w_minus, 1.5);
        assert!(w.exact);
        assert_eq!(w.p_value, 6.0 / 64.0);
        assert_eq!(w.p_value, wilcoxon_enumerated(&d));
    }

    #[test]
    fn wilcoxon_zeros_and_degenerate() {
        let w = wilcoxon_signed_rank(&[0.0, 1.0, 2.0, 0.0]).unwrap();
        assert_eq!(w.n, 2);
        assert_eq!(w.p_value, 0.5);
        let w = wilcoxon_signed_rank(&[0.0, 0.0]).unwrap();
        assert!(w.degenerate);
        assert_eq!(w.p_value, 1.0);
    }

    #[test]
    fn wilcoxon_large_sample_uses_normal_approximation() {
        // 30 positive, distinct differences. The one-sided normal tail with
        // continuity correction is 9.1e-7; the reported two-sided value doubles it.
        let d: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let w = wilcoxon_signed_rank(&d).unwrap();
        assert!(!w.exact);
        assert!((w.p_value / 2.0 - 9.1e-7).abs() < 0.05e-7, "{}", w.p_value);
    }

    #[test]
    fn exact_and_normal_agree_roughly_at_the_switch() {
        let d: Vec<f64> = (1..=25).map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 }).collect();
        let exact = wilcoxon_signed_rank(&d).unwrap();
        assert!(exact.exact);
        let nz = d.clone();
        let r = signed_ranks(&nz);
        let approx = normal_p_value(&r, exact.w_plus);
        assert!((exact.p_value - approx).abs() < 0.01);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn wilcoxon_matches_enumeration(d in prop::collection::vec(-4i32..=4, 1..=8)) {
            let d: Vec<f64> = d.into_iter().map(f64::from).collect();
            let w = wilcoxon_signed_rank(&d).unwrap();
            prop_assert!((w.p_value - wilcoxon_enumerated(&d)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&w.p_value));
        }

        #[test]
        fn t_matches_closed_form(d in prop::collection::vec(-5.0f64..5.0, 2..=8)) {
            let r = t_test(&d).unwrap();
            prop_assume!(!r.degenerate);
            let reference = t_p_reference(r.statistic, r.df as u32);
            prop_assert!((r.p_value - reference).abs() < 1e-6, "{} vs {}", r.p_value, reference);
        }
    }
}
