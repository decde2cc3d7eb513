//! Rank-based comparisons: Kruskal-Wallis with Dunn's Bonferroni-adjusted
//! pairwise follow-up.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least two groups, found {0}")]
    TooFewGroups(usize),
    #[error("group {0} is empty")]
    EmptyGroup(usize),
    #[error("non-finite observation in group {0}")]
    NonFinite(usize),
}

/// Midranks (1-based) of `values`; tied values share their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Σ (t³ − t) over tie blocks.
fn tie_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut s = 0.0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        s += t * t * t - t;
        i = j + 1;
    }
    s
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized upper incomplete gamma Q(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let lead = (-x + a * x.ln() - ln_gamma(a)).exp();
    if x < a + 1.0 {
        // Series for P(a, x).
        let mut sum = 1.0 / a;
        let mut term = sum;
        let mut n = a;
        for _ in 0..1000 {
            n += 1.0;
            term *= x / n;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (1.0 - sum * lead).clamp(0.0, 1.0)
    } else {
        // Lentz continued fraction for Q(a, x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (lead * h).clamp(0.0, 1.0)
    }
}

/// Upper tail of the chi-squared distribution.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    gamma_q(df / 2.0, x / 2.0)
}

/// Two-sided standard normal tail probability P(|Z| > |z|).
pub fn normal_two_sided_p(z: f64) -> f64 {
    chi2_sf(z * z, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DunnPair {
    pub a: usize,
    pub b: usize,
    pub z: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub h: f64,
    pub df: usize,
    pub p: f64,
    /// All observations identical: H is defined as 0 and every p as 1.
    pub degenerate: bool,
    pub pairwise: Vec<DunnPair>,
}

fn check(groups: &[Vec<f64>]) -> Result<(), StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(groups.len()));
    }
    for (i, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(StatsError::EmptyGroup(i));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite(i));
        }
    }
    Ok(())
}

struct Pooled {
    n: f64,
    rank_sums: Vec<f64>,
    sizes: Vec<f64>,
    ties: f64,
}

fn pool(groups: &[Vec<f64>]) -> Pooled {
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let ranks = midranks(&all);
    let mut rank_sums = Vec::with_capacity(groups.len());
    let mut off = 0;
    for g in groups {
        rank_sums.push(ranks[off..off + g.len()].iter().sum());
        off += g.len();
    }
    Pooled {
        n: all.len() as f64,
        rank_sums,
        sizes: groups.iter().map(|g| g.len() as f64).collect(),
        ties: tie_sum(&all),
    }
}

/// Dunn's pairwise test on pooled midranks with tie correction; two-sided p
/// values multiplied by k(k−1)/2 and capped at 1.
pub fn dunn_bonferroni(groups: &[Vec<f64>]) -> Result<Vec<DunnPair>, StatsError> {
    check(groups)?;
    let p = pool(groups);
    let k = groups.len();
    let m = (k * (k - 1) / 2) as f64;
    let var = p.n * (p.n + 1.0) / 12.0 - if p.n > 1.0 { p.ties / (12.0 * (p.n - 1.0)) } else { 0.0 };
    let mut out = Vec::with_capacity(k * (k - 1) / 2);
    for a in 0..k {
        for b in a + 1..k {
            let diff = p.rank_sums[a] / p.sizes[a] - p.rank_sums[b] / p.sizes[b];
            let se = (var * (1.0 / p.sizes[a] + 1.0 / p.sizes[b])).sqrt();
            let z = if se > 0.0 { diff / se } else { 0.0 };
            let p_raw = normal_two_sided_p(z);
            out.push(DunnPair {
                a,
                b,
                z,
                p_raw,
                p_adjusted: (p_raw * m).min(1.0),
            });
        }
    }
    Ok(out)
}

/// Kruskal-Wallis H with midrank tie correction, chi-squared p with k−1 df,
/// plus the Dunn table.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<StatTestResult, StatsError> {
    check(groups)?;
    let p = pool(groups);
    let df = groups.len() - 1;
    let pairwise = dunn_bonferroni(groups)?;
    let correction = 1.0 - p.ties / (p.n * p.n * p.n - p.n);
    if correction <= 0.0 || p.n < 2.0 {
        return Ok(StatTestResult {
            h: 0.0,
            df,
            p: 1.0,
            degenerate: true,
            pairwise,
        });
    }
    let s: f64 = p.rank_sums.iter().zip(&p.sizes).map(|(r, n)| r * r / n).sum();
    let h_raw = 12.0 / (p.n * (p.n + 1.0)) * s - 3.0 * (p.n + 1.0);
    let h = (h_raw / correction).max(0.0);
    Ok(StatTestResult {
        h,
        df,
        p: chi2_sf(h, df as f64),
        degenerate: false,
        pairwise,
    })
}

/// Median of a sample; NaN for an empty one.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_h() {
        let g = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]];
        let r = kruskal_wallis(&g).unwrap();
        assert!((r.h - 7.2).abs() < 1e-12);
        assert_eq!(r.df, 2);
        assert!((r.p - (-3.6f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn identical_groups() {
        let g = vec![vec![2.0, 2.0, 2.0], vec![2.0, 2.0, 2.0]];
        let r = kruskal_wallis(&g).unwrap();
        assert!(r.degenerate);
        assert_eq!((r.h, r.p), (0.0, 1.0));
        assert!(r.pairwise.iter().all(|d| d.p_adjusted == 1.0));
    }

    #[test]
    fn midranks_share_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn input_errors() {
        assert_eq!(kruskal_wallis(&[vec![1.0]]), Err(StatsError::TooFewGroups(1)));
        assert_eq!(kruskal_wallis(&[vec![1.0], vec![]]), Err(StatsError::EmptyGroup(1)));
        assert_eq!(kruskal_wallis(&[vec![1.0], vec![f64::NAN]]), Err(StatsError::NonFinite(1)));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
