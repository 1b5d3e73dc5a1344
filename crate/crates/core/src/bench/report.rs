//! Result persistence and report tables: the flat results CSV, the
//! human-readable cross matrix / means / combined / ablation tables, and
//! the statistical tests recomputed from the emitted rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::matrix::ResultRow;
use crate::error::{Error, Result};
use crate::stats::{one_way_anova, tukey_hsd, wilcoxon_signed_rank, TestResult, WilcoxonMode};

/// results.csv schema, one line per row.
pub fn write_results_csv(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "train_key,test_key,normalization,topology,seed,dice,iou,n_scans_evaluated,n_scans_excluded"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{:.6},{:.6},{},{}",
            r.train_key,
            r.test_key,
            r.normalization,
            r.topology,
            r.seed,
            r.dice,
            r.iou,
            r.n_scans_evaluated,
            r.n_scans_excluded
        )?;
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Rows averaged over seeds, keyed (train, test) within one
/// (normalization, topology) stratum.
fn seed_means(rows: &[&ResultRow]) -> BTreeMap<(String, String), f64> {
    let mut acc: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        acc.entry((r.train_key.clone(), r.test_key.clone()))
            .or_default()
            .push(r.dice);
    }
    acc.into_iter().map(|(k, v)| (k, mean(&v))).collect()
}

fn cross_matrix_table(out: &mut String, rows: &[&ResultRow], title: &str) {
    let means = seed_means(rows);
    let train_keys: BTreeSet<String> = means.keys().map(|(t, _)| t.clone()).collect();
    let test_keys: BTreeSet<String> = means.keys().map(|(_, t)| t.clone()).collect();
    let width = test_keys.iter().map(String::len).max().unwrap_or(8).max(8);
    let twidth = train_keys
        .iter()
        .map(String::len)
        .max()
        .unwrap_or(10)
        .max(10);
    writeln!(out, "## Cross-dataset Dice matrix ({title})").unwrap();
    write!(out, "{:twidth$}", "train\\test").unwrap();
    for t in &test_keys {
        write!(out, "  {:>width$}", t).unwrap();
    }
    writeln!(out).unwrap();
    for tr in &train_keys {
        write!(out, "{:twidth$}", tr).unwrap();
        for te in &test_keys {
            match means.get(&(tr.clone(), te.clone())) {
                Some(d) => write!(out, "  {:>width$.3}", d).unwrap(),
                None => write!(out, "  {:>width$}", "-").unwrap(),
            }
        }
        writeln!(out).unwrap();
    }
    writeln!(out).unwrap();
}

fn train_means_table(
    out: &mut String,
    rows: &[&ResultRow],
    title: &str,
) -> Vec<(String, Vec<f64>)> {
    let means = seed_means(rows);
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((tr, _), d) in &means {
        groups.entry(tr.clone()).or_default().push(*d);
    }
    writeln!(out, "## Mean Dice per training set ({title})").unwrap();
    for (tr, ds) in &groups {
        writeln!(
            out,
            "{:20}  {:.4}  (over {} test sets)",
            tr,
            mean(ds),
            ds.len()
        )
        .unwrap();
    }
    writeln!(out).unwrap();
    groups.into_iter().collect()
}

fn combined_vs_individual_table(out: &mut String, rows: &[&ResultRow], title: &str) {
    let means = seed_means(rows);
    let unions: Vec<&(String, String)> = means.keys().filter(|(t, _)| t.contains('+')).collect();
    if unions.is_empty() {
        return;
    }
    writeln!(out, "## Combined vs individual training sets ({title})").unwrap();
    for (tr, te) in unions {
        let combined = means[&(tr.clone(), te.clone())];
        let singles: Vec<String> = tr
            .split('+')
            .map(|s| {
                means
                    .get(&(s.to_string(), te.clone()))
                    .map(|d| format!("{:.3}", d))
                    .unwrap_or_else(|| "-".to_string())
            })
            .collect();
        writeln!(
            out,
            "{:30} -> {:12}  {:.3}  (individual: {})",
            tr,
            te,
            combined,
            singles.join(", ")
        )
        .unwrap();
    }
    writeln!(out).unwrap();
}

/// Two ablation arms and their paired dice values.
type PairedArms = (String, String, Vec<(f64, f64)>);

/// Pair rows that differ only in one field; returns (label_a, label_b,
/// paired dice values).
fn ablation_pairs(
    rows: &[&ResultRow],
    field: impl Fn(&ResultRow) -> String,
    rest: impl Fn(&ResultRow) -> String,
) -> Option<PairedArms> {
    let labels: BTreeSet<String> = rows.iter().map(|r| field(r)).collect();
    if labels.len() != 2 {
        return None;
    }
    let mut it = labels.into_iter();
    let (a, b) = (it.next().unwrap(), it.next().unwrap());
    let mut by_key: BTreeMap<String, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in rows {
        let slot = by_key.entry(rest(r)).or_default();
        if field(r) == a {
            slot.0 = Some(r.dice);
        } else {
            slot.1 = Some(r.dice);
        }
    }
    let pairs: Vec<(f64, f64)> = by_key
        .values()
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .collect();
    Some((a, b, pairs))
}

fn append_wilcoxon(
    out: &mut String,
    stats_out: &mut Vec<TestResult>,
    label: &str,
    a: &str,
    b: &str,
    pairs: &[(f64, f64)],
) {
    writeln!(out, "## {} ablation ({} vs {})", label, a, b).unwrap();
    for (x, y) in pairs {
        writeln!(out, "  {:.3}  {:.3}", x, y).unwrap();
    }
    let nonzero = pairs.iter().filter(|(x, y)| x != y).count();
    if nonzero >= 6 {
        match wilcoxon_signed_rank(pairs, WilcoxonMode::NormalApprox) {
            Ok(r) => {
                writeln!(
                    out,
                    "  paired Wilcoxon: W = {:.1}, p = {:.6} ({})",
                    r.statistic, r.p_value, r.method
                )
                .unwrap();
                stats_out.push(r);
            }
            Err(e) => writeln!(out, "  paired Wilcoxon unavailable: {}", e).unwrap(),
        }
    } else {
        writeln!(out, "  too few informative pairs for a Wilcoxon test").unwrap();
    }
    writeln!(out).unwrap();
}

/// Write results.csv, report.txt, and stats.json from a set of result rows
/// (typically the union of several matrix runs). Returns the paths written.
pub fn emit_report(rows: &[ResultRow], out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::validation("no rows to report"));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("results.csv");
    write_results_csv(&csv_path, rows)?;

    let mut text = String::new();
    let mut stats_results: Vec<TestResult> = Vec::new();

    // Strata: one set of tables per (normalization, topology) present.
    let strata: BTreeSet<(String, String)> = rows
        .iter()
        .map(|r| (r.normalization.clone(), r.topology.clone()))
        .collect();
    for (norm, topo) in &strata {
        let sub: Vec<&ResultRow> = rows
            .iter()
            .filter(|r| &r.normalization == norm && &r.topology == topo)
            .collect();
        let title = format!("{}, {}", norm, topo);
        cross_matrix_table(&mut text, &sub, &title);
        let groups = train_means_table(&mut text, &sub, &title);
        combined_vs_individual_table(&mut text, &sub, &title);

        // ANOVA + Tukey over per-training-set Dice when the matrix is
        // complete enough (every group the same size, at least 2 values).
        let sizes: BTreeSet<usize> = groups.iter().map(|(_, v)| v.len()).collect();
        if groups.len() >= 2 && sizes.len() == 1 && *sizes.iter().next().unwrap() >= 2 {
            let values: Vec<Vec<f64>> = groups.iter().map(|(_, v)| v.clone()).collect();
            if let Ok(r) = one_way_anova(&values) {
                writeln!(
                    text,
                    "one-way ANOVA over training sets ({}): F({}, {}) = {:.3}, p = {:.4}",
                    title, r.df[0], r.df[1], r.statistic, r.p_value
                )
                .unwrap();
                stats_results.push(r);
            }
            if let Ok(pairs) = tukey_hsd(&values) {
                for p in pairs {
                    writeln!(
                        text,
                        "  Tukey HSD {} vs {}: q = {:.3}, p = {:.4}",
                        groups[p.group_a].0,
                        groups[p.group_b].0,
                        p.result.statistic,
                        p.result.p_value
                    )
                    .unwrap();
                    stats_results.push(p.result);
                }
            }
            writeln!(text).unwrap();
        }
    }

    // Normalization ablation: rows matched on everything but normalization.
    if let Some((a, b, pairs)) = ablation_pairs(
        &rows.iter().collect::<Vec<_>>(),
        |r| r.normalization.clone(),
        |r| format!("{}|{}|{}|{}", r.train_key, r.test_key, r.topology, r.seed),
    ) {
        if !pairs.is_empty() {
            append_wilcoxon(
                &mut text,
                &mut stats_results,
                "Normalization",
                &a,
                &b,
                &pairs,
            );
        }
    }
    // Topology ablation: rows matched on everything but topology.
    if let Some((a, b, pairs)) = ablation_pairs(
        &rows.iter().collect::<Vec<_>>(),
        |r| r.topology.clone(),
        |r| {
            format!(
                "{}|{}|{}|{}",
                r.train_key, r.test_key, r.normalization, r.seed
            )
        },
    ) {
        if !pairs.is_empty() {
            append_wilcoxon(&mut text, &mut stats_results, "Topology", &a, &b, &pairs);
        }
    }

    let report_path = out_dir.join("report.txt");
    std::fs::write(&report_path, &text)?;
    let stats_path = out_dir.join("stats.json");
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats_results)?)?;
    Ok(vec![csv_path, report_path, stats_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(train: &str, test: &str, norm: &str, topo: &str, seed: u64, dice: f64) -> ResultRow {
        ResultRow {
            train_key: train.into(),
            test_key: test.into(),
            normalization: norm.into(),
            topology: topo.into(),
            seed,
            dice,
            iou: dice / (2.0 - dice),
            n_scans_evaluated: 3,
            n_scans_excluded: 0,
            per_center: BTreeMap::new(),
        }
    }

    /// The published cross-dataset Dice table as rows.
    fn reference_rows() -> Vec<ResultRow> {
        let entries = [
            ("het_small", "het_large", 0.602),
            ("het_small", "homo_large", 0.523),
            ("het_small", "homo_small", 0.569),
            ("homo_large", "het_large", 0.544),
            ("homo_large", "het_small", 0.606),
            ("homo_large", "homo_small", 0.603),
            ("het_large", "het_small", 0.698),
            ("het_large", "homo_large", 0.569),
            ("het_large", "homo_small", 0.623),
            ("homo_small", "het_small", 0.515),
            ("homo_small", "het_large", 0.516),
            ("homo_small", "homo_large", 0.460),
        ];
        entries
            .iter()
            .map(|(tr, te, d)| row(tr, te, "quantile", "nested_dense", 0, *d))
            .collect()
    }

    #[test]
    fn reference_matrix_means_recompute() {
        let rows = reference_rows();
        let dir = std::env::temp_dir().join(format!("report-{}", std::process::id()));
        let files = emit_report(&rows, &dir).unwrap();
        assert_eq!(files.len(), 3);
        let report = std::fs::read_to_string(&files[1]).unwrap();
        // Training-set means, Table-3 style.
        for needle in ["0.5647", "0.5843", "0.6300", "0.4970"] {
            assert!(
                report.contains(needle),
                "missing {} in:\n{}",
                needle,
                report
            );
        }
        let csv = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(csv.lines().count(), 13, "header plus 12 rows");
        assert!(csv.starts_with("train_key,test_key,normalization,topology,seed,dice,iou"));
    }

    #[test]
    fn single_row_report_has_no_stats_section() {
        let rows = vec![row("a", "b", "quantile", "nested_dense", 0, 0.5)];
        let dir = std::env::temp_dir().join(format!("report1-{}", std::process::id()));
        let files = emit_report(&rows, &dir).unwrap();
        let stats = std::fs::read_to_string(&files[2]).unwrap();
        assert_eq!(stats.trim(), "[]");
        let csv = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn normalization_pairs_match_by_key() {
        let mut rows = Vec::new();
        for seed in 0..3u64 {
            for (tr, te) in [("a", "b"), ("b", "a"), ("a", "c")] {
                rows.push(row(
                    tr,
                    te,
                    "quantile",
                    "nested_dense",
                    seed,
                    0.6 + seed as f64 * 0.01,
                ));
                rows.push(row(tr, te, "linear", "nested_dense", seed, 0.5));
            }
        }
        let all: Vec<&ResultRow> = rows.iter().collect();
        let (a, b, pairs) = ablation_pairs(
            &all,
            |r| r.normalization.clone(),
            |r| format!("{}|{}|{}|{}", r.train_key, r.test_key, r.topology, r.seed),
        )
        .unwrap();
        assert_eq!((a.as_str(), b.as_str()), ("linear", "quantile"));
        assert_eq!(
            pairs.len(),
            9,
            "every (train,test,seed) appears once per mode"
        );
    }
}
