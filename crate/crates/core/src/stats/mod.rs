//! Classical statistical tests over result tables: one-way ANOVA, Tukey HSD,
//! Wilcoxon signed-rank (exact and normal approximation), and one-way
//! repeated-measures ANOVA.
//!
//! Every result records the conventions used (tie handling, zero handling,
//! corrections) in its `method` string so reported p-values are auditable.

pub mod special;

use serde::Serialize;

use crate::error::{Error, Result};
use special::{f_tail, normal_cdf, studentized_range_cdf};

/// Outcome of one hypothesis test.
#[derive(Debug, Clone, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    /// One or two degrees-of-freedom values.
    pub df: Vec<f64>,
    pub p_value: f64,
    /// Test name plus the conventions that produced the numbers.
    pub method: String,
}

/// One pair in a Tukey HSD comparison, indices into the input group list.
#[derive(Debug, Clone, Serialize)]
pub struct PairwiseResult {
    pub group_a: usize,
    pub group_b: usize,
    #[serde(flatten)]
    pub result: TestResult,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn check_groups(groups: &[Vec<f64>]) -> Result<()> {
    if groups.len() < 2 {
        return Err(Error::validation("need at least 2 groups"));
    }
    for (i, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(Error::validation(format!(
                "group {} has {} values; at least 2 required",
                i,
                g.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "group {} has a non-finite value",
                i
            )));
        }
    }
    Ok(())
}

struct AnovaParts {
    ss_between: f64,
    ss_within: f64,
    df_between: f64,
    df_within: f64,
    group_means: Vec<f64>,
}

fn anova_parts(groups: &[Vec<f64>]) -> AnovaParts {
    let n_total: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n_total as f64;
    let group_means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let ss_between = groups
        .iter()
        .zip(&group_means)
        .map(|(g, &m)| g.len() as f64 * (m - grand) * (m - grand))
        .sum::<f64>();
    let ss_within = groups
        .iter()
        .zip(&group_means)
        .map(|(g, &m)| g.iter().map(|&x| (x - m) * (x - m)).sum::<f64>())
        .sum::<f64>();
    AnovaParts {
        ss_between,
        ss_within,
        df_between: (groups.len() - 1) as f64,
        df_within: (n_total - groups.len()) as f64,
        group_means,
    }
}

/// Relative threshold below which a sum of squares counts as zero.
fn ss_is_zero(ss: f64, scale: f64) -> bool {
    ss <= scale.max(1e-300) * 1e-12
}

/// One-way fixed-effects ANOVA: F = MS_between / MS_within with
/// df (k-1, N-k), p from the F upper tail.
pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<TestResult> {
    check_groups(groups)?;
    let parts = anova_parts(groups);
    let total = parts.ss_between + parts.ss_within;
    let df = vec![parts.df_between, parts.df_within];
    if ss_is_zero(parts.ss_between, total) {
        return Ok(TestResult {
            statistic: 0.0,
            df,
            p_value: 1.0,
            method: "one_way_anova".to_string(),
        });
    }
    if ss_is_zero(parts.ss_within, total) {
        // Nonzero between-group spread but no within-group variance.
        return Ok(TestResult {
            statistic: f64::INFINITY,
            df,
            p_value: 0.0,
            method: "one_way_anova [degenerate: zero within-group variance]".to_string(),
        });
    }
    let f = (parts.ss_between / parts.df_between) / (parts.ss_within / parts.df_within);
    let p = f_tail(f, parts.df_between, parts.df_within);
    Ok(TestResult {
        statistic: f,
        df,
        p_value: p,
        method: "one_way_anova".to_string(),
    })
}

/// Tukey HSD over all group pairs. Requires equal group sizes; p-values
/// come from the studentized range distribution q(k, N-k).
pub fn tukey_hsd(groups: &[Vec<f64>]) -> Result<Vec<PairwiseResult>> {
    check_groups(groups)?;
    let n = groups[0].len();
    if groups.iter().any(|g| g.len() != n) {
        return Err(Error::validation("tukey_hsd requires equal group sizes"));
    }
    let parts = anova_parts(groups);
    let ms_within = parts.ss_within / parts.df_within;
    let se = (ms_within / n as f64).sqrt();
    let k = groups.len();
    let mut out = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            let gap = (parts.group_means[i] - parts.group_means[j]).abs();
            let (q, p) = if se > 0.0 {
                let q = gap / se;
                (q, 1.0 - studentized_range_cdf(q, k, parts.df_within))
            } else if gap == 0.0 {
                (0.0, 1.0)
            } else {
                (f64::INFINITY, 0.0)
            };
            out.push(PairwiseResult {
                group_a: i,
                group_b: j,
                result: TestResult {
                    statistic: q,
                    df: vec![k as f64, parts.df_within],
                    p_value: p,
                    method: "tukey_hsd(studentized_range)".to_string(),
                },
            });
        }
    }
    Ok(out)
}

/// How the Wilcoxon p-value is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMode {
    /// Full enumeration of the 2^n sign assignments; n <= 25 required.
    Exact,
    /// Normal approximation with continuity and tie-variance corrections.
    NormalApprox,
}

/// Average 1-based ranks of `values`, ties sharing the mean of their ranks.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }
    ranks
}

const WILCOXON_EXACT_MAX_N: usize = 25;

/// Distribution of W+ over all 2^n sign assignments, on doubled ranks so
/// tied (half-integer) ranks stay integral. counts[s] is the number of
/// assignments with doubled positive-rank sum s.
fn exact_wplus_distribution(doubled_ranks: &[u64]) -> Vec<u64> {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (r..counts.len()).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

/// Paired Wilcoxon signed-rank test. Zero differences are dropped (and
/// counted in the method string); |d| ties get average ranks; the reported
/// statistic is W = min(W+, W-); p-values are two-sided.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)], mode: WilcoxonMode) -> Result<TestResult> {
    let diffs: Vec<f64> = pairs.iter().map(|&(a, b)| a - b).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::numerical("non-finite difference"));
    }
    let n_zero = diffs.iter().filter(|&&d| d == 0.0).count();
    let nonzero: Vec<f64> = diffs.into_iter().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    if n < 6 {
        return Err(Error::validation(format!(
            "only {} nonzero pairs after zero removal; at least 6 required",
            n
        )));
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = ranks
        .iter()
        .zip(&nonzero)
        .filter(|(_, &d)| d > 0.0)
        .map(|(&r, _)| r)
        .sum();
    let rank_total = n as f64 * (n + 1) as f64 / 2.0;
    let w_minus = rank_total - w_plus;
    let w = w_plus.min(w_minus);

    let (p, mode_desc) = match mode {
        WilcoxonMode::Exact => {
            if n > WILCOXON_EXACT_MAX_N {
                return Err(Error::validation(format!(
                    "exact mode limited to n <= {}, got {}",
                    WILCOXON_EXACT_MAX_N, n
                )));
            }
            let doubled: Vec<u64> = ranks.iter().map(|&r| (2.0 * r).round() as u64).collect();
            let counts = exact_wplus_distribution(&doubled);
            let total_assignments = (1u64 << n) as f64;
            let w_plus2 = (2.0 * w_plus).round() as usize;
            let le: u64 = counts[..=w_plus2].iter().sum();
            let ge: u64 = counts[w_plus2..].iter().sum();
            let p = (2.0 * (le.min(ge) as f64) / total_assignments).min(1.0);
            (p, "exact(full sign enumeration)")
        }
        WilcoxonMode::NormalApprox => {
            let nf = n as f64;
            let mean = nf * (nf + 1.0) / 4.0;
            // Tie correction on the variance: sum over tie groups of (t^3 - t) / 48.
            let mut tie_term = 0.0;
            let mut sorted = abs.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut i = 0;
            while i < n {
                let mut j = i;
                while j < n && sorted[j] == sorted[i] {
                    j += 1;
                }
                let t = (j - i) as f64;
                tie_term += (t * t * t - t) / 48.0;
                i = j;
            }
            let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
            if var <= 0.0 {
                return Err(Error::numerical("wilcoxon variance is zero (all ties)"));
            }
            // Continuity correction of 0.5 toward the mean.
            let z = (w + 0.5 - mean) / var.sqrt();
            let p = (2.0 * normal_cdf(-z.abs())).min(1.0);
            (p, "normal_approx(continuity 0.5, tie variance correction)")
        }
    };

    Ok(TestResult {
        statistic: w,
        df: vec![n as f64],
        p_value: p,
        method: format!(
            "wilcoxon_signed_rank(two_sided, {}, zeros_dropped={}, ties=average_ranks)",
            mode_desc, n_zero
        ),
    })
}

/// One-way repeated-measures ANOVA on a complete conditions x subjects
/// table: F = MS_condition / MS_error with df (k-1, (k-1)(n-1)), error SS
/// from the condition x subject residuals.
pub fn rm_anova(table: &[Vec<f64>]) -> Result<TestResult> {
    let k = table.len();
    if k < 2 {
        return Err(Error::validation("need at least 2 conditions"));
    }
    let n = table[0].len();
    if n < 2 {
        return Err(Error::validation("need at least 2 subjects"));
    }
    if table.iter().any(|row| row.len() != n) {
        return Err(Error::validation("incomplete matrix: row lengths differ"));
    }
    if table.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite table entry"));
    }

    let kf = k as f64;
    let nf = n as f64;
    let grand = table.iter().flatten().sum::<f64>() / (kf * nf);
    let cond_means: Vec<f64> = table.iter().map(|row| mean(row)).collect();
    let subj_means: Vec<f64> = (0..n)
        .map(|j| table.iter().map(|row| row[j]).sum::<f64>() / kf)
        .collect();

    let ss_cond: f64 = cond_means
        .iter()
        .map(|&m| nf * (m - grand) * (m - grand))
        .sum();
    let ss_subj: f64 = subj_means
        .iter()
        .map(|&m| kf * (m - grand) * (m - grand))
        .sum();
    let ss_total: f64 = table
        .iter()
        .flatten()
        .map(|&x| (x - grand) * (x - grand))
        .sum();
    let ss_err = (ss_total - ss_cond - ss_subj).max(0.0);

    let df_cond = kf - 1.0;
    let df_err = (kf - 1.0) * (nf - 1.0);
    let df = vec![df_cond, df_err];

    if ss_is_zero(ss_cond, ss_total) {
        return Ok(TestResult {
            statistic: 0.0,
            df,
            p_value: 1.0,
            method: "rm_anova".to_string(),
        });
    }
    if ss_is_zero(ss_err, ss_total) {
        return Ok(TestResult {
            statistic: f64::INFINITY,
            df,
            p_value: 0.0,
            method: "rm_anova [degenerate: zero residual variance]".to_string(),
        });
    }
    let f = (ss_cond / df_cond) / (ss_err / df_err);
    Ok(TestResult {
        statistic: f,
        df,
        p_value: f_tail(f, df_cond, df_err),
        method: "rm_anova".to_string(),
    })
}

/// The cross-dataset Dice table from the benchmark report, grouped by
/// training set. Kept next to the tests that reproduce the published
/// statistics from it.
#[cfg(test)]
pub(crate) fn reference_dice_groups() -> Vec<Vec<f64>> {
    vec![
        vec![0.602, 0.523, 0.569],
        vec![0.544, 0.606, 0.603],
        vec![0.698, 0.569, 0.623],
        vec![0.515, 0.516, 0.460],
    ]
}
