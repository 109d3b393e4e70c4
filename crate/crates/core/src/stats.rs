//! Rank-based significance tests, multiple-comparison correction, compact
//! letter display and bootstrap confidence intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {0} groups")]
    TooFewGroups(usize),
    #[error("group {0} is empty")]
    EmptyGroup(usize),
    #[error("Bonferroni family size {m} smaller than the {n} p values")]
    FamilyTooSmall { m: usize, n: usize },
    #[error("significance matrix must be {0}x{0} and symmetric")]
    BadMatrix(usize),
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// `sum(t^3 - t)` over tie groups.
fn tie_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut total = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        total += t * t * t - t;
        i = j + 1;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Kruskal-Wallis H with tie correction; p from the chi-square
/// approximation with `k - 1` degrees of freedom.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<TestResult, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(2));
    }
    if let Some(i) = groups.iter().position(Vec::is_empty) {
        return Err(StatsError::EmptyGroup(i));
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = pooled.len() as f64;
    let correction = 1.0 - tie_sum(&pooled) / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
        });
    }
    let ranks = average_ranks(&pooled);
    let mut offset = 0;
    let mut sum = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        sum += r * r / g.len() as f64;
        offset += g.len();
    }
    let h = (12.0 / (n * (n + 1.0)) * sum - 3.0 * (n + 1.0)) / correction;
    let h = h.max(0.0);
    let chi = ChiSquared::new((groups.len() - 1) as f64).expect("df >= 1");
    Ok(TestResult {
        statistic: h,
        p_value: chi.sf(h).clamp(0.0, 1.0),
    })
}

/// Largest sample size (per side) for which the exact permutation
/// distribution is enumerated.
pub const EXACT_MAX_N: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U of the first sample.
    pub u: f64,
    pub p_value: f64,
    pub method: PMethod,
}

/// Visits every `k`-subset of `0..n` as a running rank sum.
fn subset_rank_sums(ranks: &[f64], k: usize, start: usize, acc: f64, out: &mut Vec<f64>) {
    if k == 0 {
        out.push(acc);
        return;
    }
    for i in start..=ranks.len() - k {
        subset_rank_sums(ranks, k - 1, i + 1, acc + ranks[i], out);
    }
}

/// Two-sided Mann-Whitney U test. Exact when both samples have at most
/// [`EXACT_MAX_N`] values, normal approximation with tie and continuity
/// correction otherwise.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney, StatsError> {
    if a.is_empty() {
        return Err(StatsError::EmptyGroup(0));
    }
    if b.is_empty() {
        return Err(StatsError::EmptyGroup(1));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let base = na * (na + 1.0) / 2.0;
    let u = ranks[..a.len()].iter().sum::<f64>() - base;

    if a.len() <= EXACT_MAX_N && b.len() <= EXACT_MAX_N {
        let mut sums = Vec::new();
        subset_rank_sums(&ranks, a.len(), 0, 0.0, &mut sums);
        let total = sums.len() as f64;
        let tol = 1e-9;
        let le = sums.iter().filter(|&&s| s - base <= u + tol).count() as f64 / total;
        let ge = sums.iter().filter(|&&s| s - base >= u - tol).count() as f64 / total;
        return Ok(MannWhitney {
            u,
            p_value: (2.0 * le.min(ge)).min(1.0),
            method: PMethod::Exact,
        });
    }

    let n = na + nb;
    let mean = na * nb / 2.0;
    let var = na * nb / 12.0 * ((n + 1.0) - tie_sum(&pooled) / (n * (n - 1.0)));
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mean).abs() - 0.5) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * normal.sf(z)).min(1.0)
    };
    Ok(MannWhitney {
        u,
        p_value,
        method: PMethod::Normal,
    })
}

/// `p' = min(1, m p)` for a family of `m` comparisons.
pub fn bonferroni(pvals: &[f64], m: usize) -> Result<Vec<f64>, StatsError> {
    if m < pvals.len() {
        return Err(StatsError::FamilyTooSmall { m, n: pvals.len() });
    }
    Ok(pvals.iter().map(|p| (p * m as f64).min(1.0)).collect())
}

fn letter(i: usize) -> char {
    const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
    LETTERS.get(i).map_or('?', |&c| c as char)
}

/// Compact letter display by insert-and-absorb. Groups that share a letter
/// are not significantly different. Letters are handed out starting from
/// the group with the lowest mean; ties keep input order.
pub fn letter_display(means: &[f64], significant: &[Vec<bool>]) -> Result<Vec<String>, StatsError> {
    let k = means.len();
    if significant.len() != k || significant.iter().any(|r| r.len() != k) {
        return Err(StatsError::BadMatrix(k));
    }
    let symmetric = (0..k).all(|i| (0..k).all(|j| significant[i][j] == significant[j][i]));
    if !symmetric {
        return Err(StatsError::BadMatrix(k));
    }
    if k == 0 {
        return Ok(Vec::new());
    }

    let mut columns: Vec<Vec<bool>> = vec![vec![true; k]];
    for i in 0..k {
        for j in i + 1..k {
            if !significant[i][j] {
                continue;
            }
            let mut next = Vec::new();
            for col in columns {
                if col[i] && col[j] {
                    let mut without_i = col.clone();
                    without_i[i] = false;
                    let mut without_j = col;
                    without_j[j] = false;
                    next.push(without_j);
                    next.push(without_i);
                } else {
                    next.push(col);
                }
            }
            // Absorb columns contained in another one.
            let mut kept: Vec<Vec<bool>> = Vec::new();
            for (a, col) in next.iter().enumerate() {
                let absorbed = next.iter().enumerate().any(|(b, other)| {
                    a != b && col.iter().zip(other).all(|(x, y)| !x || *y) && (col != other || b < a)
                });
                if !absorbed && col.iter().any(|&x| x) {
                    kept.push(col.clone());
                }
            }
            columns = kept;
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
    let mut position = vec![0; k];
    for (pos, &g) in order.iter().enumerate() {
        position[g] = pos;
    }
    let first_member = |col: &Vec<bool>| {
        (0..k)
            .filter(|&g| col[g])
            .map(|g| position[g])
            .min()
            .unwrap_or(usize::MAX)
    };
    columns.sort_by_key(|c| first_member(c));

    Ok((0..k)
        .map(|g| {
            columns
                .iter()
                .enumerate()
                .filter(|(_, c)| c[g])
                .map(|(i, _)| letter(i))
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

pub const BOOTSTRAP_RESAMPLES: usize = 2000;

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean with a bias-corrected percentile bootstrap interval.
pub fn bootstrap_ci(values: &[f64], resamples: usize, confidence: f64, seed: u64) -> Option<Interval> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 || values.iter().all(|&v| v == values[0]) || resamples == 0 {
        return Some(Interval {
            mean,
            lo: mean,
            hi: mean,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);

    let below = means.iter().filter(|&&m| m < mean).count() as f64;
    let equal = means.iter().filter(|&&m| m == mean).count() as f64;
    let b = resamples as f64;
    let frac = ((below + 0.5 * equal) / b).clamp(0.5 / b, 1.0 - 0.5 / b);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let z0 = normal.inverse_cdf(frac);
    let alpha = 1.0 - confidence;
    let z_lo = normal.inverse_cdf(alpha / 2.0);
    let z_hi = normal.inverse_cdf(1.0 - alpha / 2.0);
    Some(Interval {
        mean,
        lo: quantile_sorted(&means, normal.cdf(2.0 * z0 + z_lo)),
        hi: quantile_sorted(&means, normal.cdf(2.0 * z0 + z_hi)),
    })
}
