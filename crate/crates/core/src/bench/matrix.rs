//! The cross-dataset experiment matrix: train on each configured training
//! set (singletons or unions), test on every disjoint test dataset, under a
//! chosen normalization and topology, across seeds.
//!
//! Rows persist incrementally as JSON files so an interrupted matrix
//! resumes without recomputing finished rows, and every stochastic step
//! derives from the experiment seed through the documented hash chain, so a
//! row's numbers are bit-identical no matter how many jobs run the matrix.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::harmonize::{build_template, linear_normalize, quantile_normalize};
use crate::metrics::{dataset_score, ScanScore};
use crate::segnet::{derive_seed, train, Network, TrainConfig};
use crate::slicer::{extract_slices, SliceSample};
use crate::volume::{load_label_volume, load_volume, LabelVolume, Provenance, Volume};

/// Intensity normalization applied before slicing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Quantile,
    Linear,
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Normalization::Quantile => write!(f, "quantile"),
            Normalization::Linear => write!(f, "linear"),
        }
    }
}

/// Declarative description of one experiment matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    /// Each entry is one training set: a singleton or a union of datasets.
    pub train_sets: Vec<Vec<String>>,
    /// Candidate test datasets; members of the current training set are
    /// excluded automatically.
    pub test_sets: Vec<String>,
    pub normalization: Normalization,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Quantile-template resolution.
    pub template_m: usize,
    /// Affinely rescale the training template onto [0, 1]. The reference
    /// distribution's shape is what matters for harmonization; a unit range
    /// keeps network inputs on one scale, without a DC pedestal, no matter
    /// which dataset built the template.
    pub unit_template: bool,
    pub min_brain_voxels: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            train_sets: Vec::new(),
            test_sets: Vec::new(),
            normalization: Normalization::Quantile,
            train: TrainConfig::default(),
            seeds: vec![0],
            template_m: 1024,
            unit_template: true,
            min_brain_voxels: 1,
        }
    }
}

/// One (train set, test set, seed) outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub train_key: String,
    pub test_key: String,
    pub normalization: String,
    pub topology: String,
    pub seed: u64,
    pub dice: f64,
    pub iou: f64,
    pub n_scans_evaluated: usize,
    pub n_scans_excluded: usize,
    pub per_center: BTreeMap<String, f64>,
}

fn train_key(sets: &[String]) -> String {
    sets.join("+")
}

fn sanitize(key: &str) -> String {
    key.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '+' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// A loaded, normalized scan ready for slicing.
struct PreparedScan {
    volume: Volume,
    mask: LabelVolume,
    center_tag: String,
}

fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<PreparedScan>> {
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let volume = load_volume(manifest.resolve(&e.image_path))?.with_provenance(Provenance {
            dataset_id: manifest.dataset_id.clone(),
            patient_id: e.patient_id.clone(),
            scan_id: e.scan_id.clone(),
            modality: "FLAIR".into(),
        });
        let mask = load_label_volume(manifest.resolve(DatasetManifest::truth_path(e)))?;
        crate::volume::validate_pair(&volume, &mask)?;
        out.push(PreparedScan {
            volume,
            mask,
            center_tag: e.center_tag.clone(),
        });
    }
    Ok(out)
}

/// Mean Dice per center tag over non-excluded scans; scans without a tag
/// fall into "untagged".
pub fn per_center_breakdown(
    scores: &[ScanScore],
    centers: &BTreeMap<String, String>,
) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in scores {
        if s.empty_truth {
            continue;
        }
        let tag = centers
            .get(&s.scan_id)
            .filter(|t| !t.is_empty())
            .cloned()
            .unwrap_or_else(|| "untagged".to_string());
        let e = sums.entry(tag).or_insert((0.0, 0));
        e.0 += s.dice;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(tag, (sum, n))| (tag, sum / n as f64))
        .collect()
}

struct RowTask {
    train_ids: Vec<String>,
    test_ids: Vec<String>,
    seed_index: usize,
}

fn row_path(out_dir: &Path, key: &str) -> PathBuf {
    out_dir.join("rows").join(format!("{}.json", sanitize(key)))
}

fn persist_row(out_dir: &Path, key: &str, row: &ResultRow) -> Result<()> {
    let path = row_path(out_dir, key);
    std::fs::create_dir_all(path.parent().unwrap())?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(row)?)?;
    std::fs::rename(&tmp, &path)?;
    Ok(())
}

fn load_row(out_dir: &Path, key: &str) -> Option<ResultRow> {
    let path = row_path(out_dir, key);
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

/// Run (or resume) the matrix. Rows already on disk under
/// `out_dir/rows/` are reused untouched; missing rows are computed, each
/// task training once and evaluating on all its test sets.
pub fn run_matrix(
    spec: &ExperimentSpec,
    manifests: &[DatasetManifest],
    out_dir: Option<&Path>,
) -> Result<Vec<ResultRow>> {
    spec.train.validate()?;
    if spec.train_sets.is_empty() || spec.test_sets.is_empty() || spec.seeds.is_empty() {
        return Err(Error::validation(
            "matrix needs train sets, test sets and seeds",
        ));
    }
    if spec.template_m < 2 {
        return Err(Error::validation("template_m must be at least 2"));
    }
    let by_id: HashMap<&str, &DatasetManifest> = manifests
        .iter()
        .map(|m| (m.dataset_id.as_str(), m))
        .collect();
    for id in spec
        .train_sets
        .iter()
        .flatten()
        .chain(spec.test_sets.iter())
    {
        if !by_id.contains_key(id.as_str()) {
            return Err(Error::data(format!("dataset {} has no manifest", id)));
        }
    }

    let mut tasks = Vec::new();
    for train_ids in &spec.train_sets {
        let test_ids: Vec<String> = spec
            .test_sets
            .iter()
            .filter(|t| !train_ids.contains(t))
            .cloned()
            .collect();
        if test_ids.is_empty() {
            return Err(Error::validation(format!(
                "training set {} leaves no disjoint test set",
                train_key(train_ids)
            )));
        }
        for seed_index in 0..spec.seeds.len() {
            tasks.push(RowTask {
                train_ids: train_ids.clone(),
                test_ids: test_ids.clone(),
                seed_index,
            });
        }
    }

    let results: Vec<Result<Vec<ResultRow>>> = tasks
        .par_iter()
        .map(|task| run_task(spec, &by_id, task, out_dir))
        .collect();

    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

fn task_key(spec: &ExperimentSpec, task: &RowTask) -> String {
    format!(
        "{}|{}|{}|s{}",
        train_key(&task.train_ids),
        spec.normalization,
        spec.train.topology.kind,
        spec.seeds[task.seed_index]
    )
}

fn run_task(
    spec: &ExperimentSpec,
    by_id: &HashMap<&str, &DatasetManifest>,
    task: &RowTask,
    out_dir: Option<&Path>,
) -> Result<Vec<ResultRow>> {
    let tkey = task_key(spec, task);
    let seed = spec.seeds[task.seed_index];

    // Resume: if every row of this task is already on disk, skip the
    // training entirely.
    if let Some(dir) = out_dir {
        let existing: Vec<Option<ResultRow>> = task
            .test_ids
            .iter()
            .map(|t| load_row(dir, &format!("{}|{}", tkey, t)))
            .collect();
        if existing.iter().all(Option::is_some) {
            return Ok(existing.into_iter().flatten().collect());
        }
    }

    let train_scans: Vec<PreparedScan> = {
        let mut all = Vec::new();
        for id in &task.train_ids {
            all.extend(load_dataset(by_id[id.as_str()])?);
        }
        all
    };
    let train_scan_ids: BTreeSet<String> = train_scans
        .iter()
        .map(|s| s.volume.provenance.scan_id.clone())
        .collect();

    // Normalize training data; the quantile template comes from the
    // training scans only.
    let template = match spec.normalization {
        Normalization::Quantile => {
            let mut t = build_template(
                &train_scans
                    .iter()
                    .map(|s| s.volume.clone())
                    .collect::<Vec<_>>(),
                spec.template_m,
            )?;
            if spec.unit_template {
                let lo = t.quantiles[0];
                let span = *t.quantiles.last().unwrap() - lo;
                if span > 0.0 {
                    for q in t.quantiles.iter_mut() {
                        *q = (*q - lo) / span;
                    }
                }
            }
            Some(t)
        }
        Normalization::Linear => None,
    };
    let normalize = |v: &Volume| -> Result<Volume> {
        match (&spec.normalization, &template) {
            (Normalization::Quantile, Some(t)) => quantile_normalize(v, t),
            (Normalization::Linear, _) => linear_normalize(v),
            _ => unreachable!(),
        }
    };

    let mut train_slices: Vec<SliceSample> = Vec::new();
    for scan in &train_scans {
        let normalized = normalize(&scan.volume)?;
        train_slices.extend(extract_slices(
            &normalized,
            &scan.mask,
            spec.min_brain_voxels,
        )?);
    }

    let mut cfg: TrainConfig = spec.train.clone();
    cfg.seed = derive_seed(spec.train.seed, &tkey, 0);
    let (params, _log) = train(&train_slices, &cfg)?;
    let net = Network::new(cfg.topology)?;

    let mut rows = Vec::new();
    for test_id in &task.test_ids {
        let manifest = by_id[test_id.as_str()];
        let test_scans = load_dataset(manifest)?;
        for s in &test_scans {
            if train_scan_ids.contains(&s.volume.provenance.scan_id) {
                return Err(Error::validation(format!(
                    "train/test leakage: scan {} appears on both sides of row {}|{}",
                    s.volume.provenance.scan_id, tkey, test_id
                )));
            }
        }
        let mut test_slices: Vec<SliceSample> = Vec::new();
        let mut centers: BTreeMap<String, String> = BTreeMap::new();
        for scan in &test_scans {
            let normalized = normalize(&scan.volume)?;
            centers.insert(
                format!("{}/{}", test_id, scan.volume.provenance.scan_id),
                scan.center_tag.clone(),
            );
            test_slices.extend(extract_slices(
                &normalized,
                &scan.mask,
                spec.min_brain_voxels,
            )?);
        }
        let scores =
            crate::segnet::score_by_scan(&net, &params, &test_slices, cfg.prediction_threshold)?;
        let (dice, iou) = dataset_score(&scores)?;
        let n_excluded = scores.iter().filter(|s| s.empty_truth).count();
        let row = ResultRow {
            train_key: train_key(&task.train_ids),
            test_key: test_id.clone(),
            normalization: spec.normalization.to_string(),
            topology: spec.train.topology.kind.to_string(),
            seed,
            dice,
            iou,
            n_scans_evaluated: scores.len() - n_excluded,
            n_scans_excluded: n_excluded,
            per_center: per_center_breakdown(&scores, &centers),
        };
        if let Some(dir) = out_dir {
            persist_row(dir, &format!("{}|{}", tkey, test_id), &row)?;
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn union_targets_exclude_members() {
        let spec = ExperimentSpec {
            train_sets: vec![vec!["a".into(), "b".into()]],
            test_sets: vec!["a".into(), "b".into(), "c".into()],
            ..ExperimentSpec::default()
        };
        let task = RowTask {
            train_ids: spec.train_sets[0].clone(),
            test_ids: spec
                .test_sets
                .iter()
                .filter(|t| !spec.train_sets[0].contains(t))
                .cloned()
                .collect(),
            seed_index: 0,
        };
        assert_eq!(task.test_ids, vec!["c".to_string()]);
        assert_eq!(task_key(&spec, &task), "a+b|quantile|nested_dense|s0");
    }

    #[test]
    fn per_center_groups_and_recombines() {
        use crate::metrics::ConfusionCounts;
        let mk = |id: &str, dice: f64| ScanScore {
            scan_id: id.to_string(),
            dice,
            iou: 0.0,
            counts: ConfusionCounts {
                true_pos: 1,
                ..Default::default()
            },
            empty_truth: false,
        };
        let scores = vec![mk("s1", 1.0), mk("s2", 0.0), mk("s3", 0.5)];
        let centers: BTreeMap<String, String> = [
            ("s1".to_string(), "c1".to_string()),
            ("s2".to_string(), "c2".to_string()),
        ]
        .into_iter()
        .collect();
        let b = per_center_breakdown(&scores, &centers);
        assert_eq!(b["c1"], 1.0);
        assert_eq!(b["c2"], 0.0);
        assert_eq!(b["untagged"], 0.5);
        // Weighted by scan counts the groups recombine to the overall mean.
        let total: f64 = b.values().sum::<f64>();
        assert!((total / 3.0 - 0.5).abs() < 1e-12);
    }
}
