//! Command-line front end for the lesion segmentation benchmark harness.
//!
//! Exit codes: 0 success, 2 validation error, 3 data error, 4 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lesionbench::bench::{
    default_site_profiles, emit_report, generate_phantom_dataset, load_manifest, run_matrix,
    save_manifest, DatasetManifest, ExperimentSpec, Normalization, ResultRow,
};
use lesionbench::error::{Error, Result};
use lesionbench::harmonize::{
    build_template, linear_normalize, quantile_normalize, IntensityTemplate,
};
use lesionbench::metrics::{dataset_score, fuse_majority, fuse_union, rater_agreement, ScoreRow};
use lesionbench::segnet::{
    load_checkpoint, save_checkpoint, score_by_scan, train, Network, TrainConfig,
};
use lesionbench::slicer::{extract_slices, Grid, SliceSample};
use lesionbench::stats::{one_way_anova, rm_anova, tukey_hsd, wilcoxon_signed_rank, WilcoxonMode};
use lesionbench::volume::{
    load_label_volume, load_volume, save_label_volume, save_volume, validate_pair, LabelVolume,
    Provenance, Volume,
};

#[derive(Parser)]
#[command(
    name = "lesionbench",
    version,
    about = "Cross-dataset lesion segmentation benchmark harness"
)]
struct Cli {
    /// Base seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON config overriding training or matrix settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizationArg {
    Quantile,
    Linear,
}

impl From<NormalizationArg> for Normalization {
    fn from(n: NormalizationArg) -> Self {
        match n {
            NormalizationArg::Quantile => Normalization::Quantile,
            NormalizationArg::Linear => Normalization::Linear,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsTest {
    Anova,
    Tukey,
    Wilcoxon,
    RmAnova,
}

#[derive(Clone, Copy, ValueEnum)]
enum WilcoxonModeArg {
    Exact,
    Approx,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset manifest and every scan it references.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        /// Minimum nonzero image voxels for a plane to count as brain.
        #[arg(long, default_value_t = 1)]
        min_brain_voxels: usize,
    },
    /// Generate the synthetic multi-site phantom suite.
    Phantom {
        /// Scans per site.
        #[arg(long, default_value_t = 6)]
        scans: usize,
    },
    /// Build an intensity template and write normalized volumes.
    Normalize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "quantile")]
        mode: NormalizationArg,
        /// Reuse an existing template instead of building one.
        #[arg(long)]
        template: Option<PathBuf>,
        /// Template resolution when building.
        #[arg(long, default_value_t = 1024)]
        template_m: usize,
    },
    /// Train a model on one dataset.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "quantile")]
        normalization: NormalizationArg,
        #[arg(long, default_value_t = 1024)]
        template_m: usize,
        #[arg(long, default_value_t = 1)]
        min_brain_voxels: usize,
    },
    /// Evaluate a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "quantile")]
        normalization: NormalizationArg,
        /// Template the training run produced (quantile mode).
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        min_brain_voxels: usize,
    },
    /// Run a full cross-dataset experiment matrix (resumable).
    Matrix {
        /// Dataset manifests.
        #[arg(long, num_args = 1..)]
        manifests: Vec<PathBuf>,
    },
    /// Statistical tests over a CSV of values.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        test: StatsTest,
        #[arg(long, default_value = "value")]
        value_col: String,
        #[arg(long, default_value = "group")]
        group_col: String,
        #[arg(long, default_value = "subject")]
        subject_col: String,
        /// Paired columns for the Wilcoxon test.
        #[arg(long, default_value = "a")]
        a_col: String,
        #[arg(long, default_value = "b")]
        b_col: String,
        #[arg(long, value_enum, default_value = "approx")]
        mode: WilcoxonModeArg,
    },
    /// Inter-rater agreement on one scan's masks.
    Agree {
        #[arg(long, num_args = 2..)]
        masks: Vec<PathBuf>,
        #[arg(long)]
        consensus: Option<PathBuf>,
    },
    /// Fuse rater masks into a consensus mask.
    Fuse {
        #[arg(long, num_args = 1..)]
        masks: Vec<PathBuf>,
        #[arg(long, default_value = "union")]
        method: String,
        /// Vote threshold for majority fusion.
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Render a prediction/truth overlay PNG for one axial slice.
    Overlay {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        z: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Rebuild report tables from persisted matrix rows.
    Report {
        /// Directory holding rows/*.json (defaults to --out).
        #[arg(long)]
        rows: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
        {
            eprintln!("error: could not size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_train_config(cli_config: &Option<PathBuf>, seed: u64) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match cli_config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    if seed != 0 {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Load, normalize and slice every scan of a manifest; quantile mode maps
/// onto the given template.
fn prepare_dataset(
    manifest: &DatasetManifest,
    normalization: Normalization,
    template: Option<&IntensityTemplate>,
    min_brain_voxels: usize,
) -> Result<Vec<SliceSample>> {
    let mut slices = Vec::new();
    for entry in &manifest.entries {
        let vol = load_volume(manifest.resolve(&entry.image_path))?.with_provenance(Provenance {
            dataset_id: manifest.dataset_id.clone(),
            patient_id: entry.patient_id.clone(),
            scan_id: entry.scan_id.clone(),
            modality: "FLAIR".into(),
        });
        let mask = load_label_volume(manifest.resolve(DatasetManifest::truth_path(entry)))?;
        validate_pair(&vol, &mask)?;
        let normalized = match normalization {
            Normalization::Quantile => {
                let t = template
                    .ok_or_else(|| Error::validation("quantile normalization needs a template"))?;
                quantile_normalize(&vol, t)?
            }
            Normalization::Linear => linear_normalize(&vol)?,
        };
        slices.extend(extract_slices(&normalized, &mask, min_brain_voxels)?);
    }
    Ok(slices)
}

fn dataset_volumes(manifest: &DatasetManifest) -> Result<Vec<Volume>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(
                load_volume(manifest.resolve(&e.image_path))?.with_provenance(Provenance {
                    dataset_id: manifest.dataset_id.clone(),
                    patient_id: e.patient_id.clone(),
                    scan_id: e.scan_id.clone(),
                    modality: "FLAIR".into(),
                }),
            )
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            manifest,
            min_brain_voxels,
        } => {
            let m = load_manifest(&manifest)?;
            let mut total_slices = 0usize;
            let mut total_lesion = 0usize;
            for e in &m.entries {
                let vol = load_volume(m.resolve(&e.image_path))?;
                for mask_path in e.mask_paths.iter().chain(e.consensus_path.iter()) {
                    let mask = load_label_volume(m.resolve(mask_path))?;
                    validate_pair(&vol, &mask)?;
                }
                let truth = load_label_volume(m.resolve(DatasetManifest::truth_path(e)))?;
                let (_, _, nz) = vol.dims();
                let slices = (0..nz)
                    .filter(|&z| {
                        vol.plane(z).iter().filter(|&&v| v != 0.0).count()
                            >= min_brain_voxels.max(1)
                    })
                    .count();
                total_slices += slices;
                total_lesion += truth.lesion_voxels();
                println!(
                    "{}/{}: dims {:?} spacing {:.1?} orientation {} brain_slices {} lesion_voxels {}",
                    e.patient_id,
                    e.scan_id,
                    vol.dims(),
                    vol.spacing(),
                    vol.orientation,
                    slices,
                    truth.lesion_voxels()
                );
            }
            println!(
                "dataset {}: {} scans, {} brain slices, {} lesion voxels",
                m.dataset_id,
                m.entries.len(),
                total_slices,
                total_lesion
            );
            Ok(())
        }

        Command::Phantom { scans } => {
            std::fs::create_dir_all(&cli.out)?;
            for profile in default_site_profiles(cli.seed) {
                let dir = cli.out.join(&profile.site_id);
                let manifest = generate_phantom_dataset(&profile, scans, &dir)?;
                let path = dir.join("manifest.json");
                save_manifest(&manifest, &path)?;
                println!("{}: {} scans -> {}", profile.site_id, scans, path.display());
            }
            Ok(())
        }

        Command::Normalize {
            manifest,
            mode,
            template,
            template_m,
        } => {
            let m = load_manifest(&manifest)?;
            std::fs::create_dir_all(&cli.out)?;
            let mode: Normalization = mode.into();
            let tpl = match (&mode, &template) {
                (Normalization::Quantile, Some(path)) => Some(IntensityTemplate::from_json(
                    &std::fs::read_to_string(path)?,
                )?),
                (Normalization::Quantile, None) => {
                    let vols = dataset_volumes(&m)?;
                    let t = build_template(&vols, template_m)?;
                    let tpl_path = cli.out.join("template.json");
                    std::fs::write(&tpl_path, t.to_json()?)?;
                    println!("template -> {}", tpl_path.display());
                    Some(t)
                }
                (Normalization::Linear, _) => None,
            };
            for e in &m.entries {
                let vol = load_volume(m.resolve(&e.image_path))?;
                let normalized = match (&mode, &tpl) {
                    (Normalization::Quantile, Some(t)) => quantile_normalize(&vol, t)?,
                    _ => linear_normalize(&vol)?,
                };
                let name = Path::new(&e.image_path)
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or("scan.nii");
                let out_path = cli.out.join(format!("norm_{name}"));
                save_volume(&normalized, &out_path)?;
                println!("{} -> {}", e.scan_id, out_path.display());
            }
            Ok(())
        }

        Command::Train {
            manifest,
            normalization,
            template_m,
            min_brain_voxels,
        } => {
            let m = load_manifest(&manifest)?;
            let cfg = load_train_config(&cli.config, cli.seed)?;
            std::fs::create_dir_all(&cli.out)?;
            let normalization: Normalization = normalization.into();
            let template = match normalization {
                Normalization::Quantile => {
                    let vols = dataset_volumes(&m)?;
                    let t = build_template(&vols, template_m)?;
                    std::fs::write(cli.out.join("template.json"), t.to_json()?)?;
                    Some(t)
                }
                Normalization::Linear => None,
            };
            let slices = prepare_dataset(&m, normalization, template.as_ref(), min_brain_voxels)?;
            println!("training on {} slices from {}", slices.len(), m.dataset_id);
            let (params, log) = train(&slices, &cfg)?;
            let best = log
                .iter()
                .map(|l| l.val_dice)
                .fold(f64::NEG_INFINITY, f64::max);
            let best_epoch = log
                .iter()
                .find(|l| l.val_dice == best)
                .map(|l| l.epoch)
                .unwrap_or(0);
            let ckpt = cli.out.join("model.ckpt");
            save_checkpoint(&ckpt, &params, &cfg, best_epoch, best)?;
            std::fs::write(
                cli.out.join("train_log.json"),
                serde_json::to_string_pretty(&log)?,
            )?;
            println!(
                "best val dice {:.4} at epoch {}; checkpoint -> {}",
                best,
                best_epoch,
                ckpt.display()
            );
            Ok(())
        }

        Command::Evaluate {
            checkpoint,
            manifest,
            normalization,
            template,
            min_brain_voxels,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let m = load_manifest(&manifest)?;
            let normalization: Normalization = normalization.into();
            let tpl = match (&normalization, &template) {
                (Normalization::Quantile, Some(path)) => Some(IntensityTemplate::from_json(
                    &std::fs::read_to_string(path)?,
                )?),
                (Normalization::Quantile, None) => {
                    return Err(Error::validation(
                        "quantile evaluation needs --template from the training run",
                    ))
                }
                (Normalization::Linear, _) => None,
            };
            let slices = prepare_dataset(&m, normalization, tpl.as_ref(), min_brain_voxels)?;
            let net = Network::new(ckpt.params.topology)?;
            let scores = score_by_scan(
                &net,
                &ckpt.params,
                &slices,
                ckpt.config.prediction_threshold,
            )?;
            std::fs::create_dir_all(&cli.out)?;
            let rows: Vec<ScoreRow> = scores
                .iter()
                .map(|s| ScoreRow {
                    train_set: "checkpoint".into(),
                    test_set: m.dataset_id.clone(),
                    score: s.clone(),
                })
                .collect();
            let csv = cli.out.join("scores.csv");
            lesionbench::metrics::write_scores_csv(&csv, &rows)?;
            let (dice, iou) = dataset_score(&scores)?;
            println!(
                "{}: dice {:.4} iou {:.4} over {} scans ({} excluded) -> {}",
                m.dataset_id,
                dice,
                iou,
                scores.iter().filter(|s| !s.empty_truth).count(),
                scores.iter().filter(|s| s.empty_truth).count(),
                csv.display()
            );
            Ok(())
        }

        Command::Matrix { manifests } => {
            let mut spec: ExperimentSpec = match &cli.config {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
                None => ExperimentSpec::default(),
            };
            if cli.seed != 0 {
                spec.train.seed = cli.seed;
            }
            let loaded: Vec<DatasetManifest> =
                manifests.iter().map(load_manifest).collect::<Result<_>>()?;
            if spec.train_sets.is_empty() {
                spec.train_sets = loaded.iter().map(|m| vec![m.dataset_id.clone()]).collect();
            }
            if spec.test_sets.is_empty() {
                spec.test_sets = loaded.iter().map(|m| m.dataset_id.clone()).collect();
            }
            std::fs::create_dir_all(&cli.out)?;
            let rows = run_matrix(&spec, &loaded, Some(&cli.out))?;
            let files = emit_report(&rows, &cli.out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }

        Command::Stats {
            input,
            test,
            value_col,
            group_col,
            subject_col,
            a_col,
            b_col,
            mode,
        } => {
            let table = read_csv(&input)?;
            match test {
                StatsTest::Anova => {
                    let groups = collect_groups(&table, &group_col, &value_col)?;
                    print_json(&one_way_anova(&groups)?)
                }
                StatsTest::Tukey => {
                    let groups = collect_groups(&table, &group_col, &value_col)?;
                    print_json(&tukey_hsd(&groups)?)
                }
                StatsTest::RmAnova => {
                    let matrix = collect_matrix(&table, &group_col, &subject_col, &value_col)?;
                    print_json(&rm_anova(&matrix)?)
                }
                StatsTest::Wilcoxon => {
                    let pairs = collect_pairs(&table, &a_col, &b_col)?;
                    let mode = match mode {
                        WilcoxonModeArg::Exact => WilcoxonMode::Exact,
                        WilcoxonModeArg::Approx => WilcoxonMode::NormalApprox,
                    };
                    print_json(&wilcoxon_signed_rank(&pairs, mode)?)
                }
            }
        }

        Command::Agree { masks, consensus } => {
            let loaded: Vec<LabelVolume> =
                masks.iter().map(load_label_volume).collect::<Result<_>>()?;
            let refs: Vec<&LabelVolume> = loaded.iter().collect();
            let cons = match &consensus {
                Some(p) => Some(load_label_volume(p)?),
                None => None,
            };
            print_json(&serde_json::json!({
                "n_raters": refs.len(),
                "pairwise_mean_dice": rater_agreement(&refs, cons.as_ref())?.pairwise_mean_dice,
                "consensus_mean_dice": rater_agreement(&refs, cons.as_ref())?.consensus_mean_dice,
            }))
        }

        Command::Fuse {
            masks,
            method,
            k,
            output,
        } => {
            let loaded: Vec<LabelVolume> =
                masks.iter().map(load_label_volume).collect::<Result<_>>()?;
            let refs: Vec<&LabelVolume> = loaded.iter().collect();
            let fused = match method.as_str() {
                "union" => fuse_union(&refs)?,
                "majority" => fuse_majority(&refs, k)?,
                other => {
                    return Err(Error::validation(format!(
                        "unknown fusion method {:?} (union or majority)",
                        other
                    )))
                }
            };
            save_label_volume(&fused, &output)?;
            println!(
                "{} fusion of {} masks ({} lesion voxels) -> {}",
                method,
                refs.len(),
                fused.lesion_voxels(),
                output.display()
            );
            Ok(())
        }

        Command::Overlay {
            image,
            pred,
            truth,
            z,
            output,
        } => {
            let vol = load_volume(&image)?;
            let p = load_label_volume(&pred)?;
            let t = load_label_volume(&truth)?;
            validate_pair(&vol, &p)?;
            validate_pair(&vol, &t)?;
            let (nx, ny, nz) = vol.dims();
            if z >= nz {
                return Err(Error::validation(format!(
                    "z index {} out of range 0..{}",
                    z, nz
                )));
            }
            let img = Grid::new(ny, nx, vol.plane(z).to_vec());
            let pg = Grid::new(ny, nx, p.plane(z).to_vec());
            let tg = Grid::new(ny, nx, t.plane(z).to_vec());
            lesionbench::bench::render_overlay(&img, &pg, &tg, &output)?;
            println!("overlay -> {}", output.display());
            Ok(())
        }

        Command::Report { rows } => {
            let rows_dir = rows.unwrap_or_else(|| cli.out.clone()).join("rows");
            let mut loaded: Vec<ResultRow> = Vec::new();
            for entry in std::fs::read_dir(&rows_dir)
                .map_err(|e| Error::data(format!("{}: {}", rows_dir.display(), e)))?
            {
                let path = entry?.path();
                if path.extension().map(|e| e == "json").unwrap_or(false) {
                    loaded.push(serde_json::from_str(&std::fs::read_to_string(&path)?)?);
                }
            }
            loaded.sort_by(|a, b| {
                (
                    &a.train_key,
                    &a.test_key,
                    &a.normalization,
                    &a.topology,
                    a.seed,
                )
                    .cmp(&(
                        &b.train_key,
                        &b.test_key,
                        &b.normalization,
                        &b.topology,
                        b.seed,
                    ))
            });
            let files = emit_report(&loaded, &cli.out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

type CsvTable = (Vec<String>, Vec<Vec<String>>);

fn read_csv(path: &Path) -> Result<CsvTable> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok((headers, rows))
}

fn column_index(headers: &[String], name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::validation(format!("column {:?} not found in {:?}", name, headers)))
}

fn parse_value(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::data(format!("not a number: {:?}", s)))
}

fn collect_groups(table: &CsvTable, group_col: &str, value_col: &str) -> Result<Vec<Vec<f64>>> {
    let (headers, rows) = table;
    let gi = column_index(headers, group_col)?;
    let vi = column_index(headers, value_col)?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<f64>> = std::collections::HashMap::new();
    for row in rows {
        let g = row[gi].clone();
        if !groups.contains_key(&g) {
            order.push(g.clone());
        }
        groups.entry(g).or_default().push(parse_value(&row[vi])?);
    }
    Ok(order
        .into_iter()
        .map(|g| groups.remove(&g).unwrap())
        .collect())
}

fn collect_matrix(
    table: &CsvTable,
    condition_col: &str,
    subject_col: &str,
    value_col: &str,
) -> Result<Vec<Vec<f64>>> {
    let (headers, rows) = table;
    let ci = column_index(headers, condition_col)?;
    let si = column_index(headers, subject_col)?;
    let vi = column_index(headers, value_col)?;
    let mut conditions: Vec<String> = Vec::new();
    let mut subjects: Vec<String> = Vec::new();
    let mut cells: std::collections::HashMap<(String, String), f64> =
        std::collections::HashMap::new();
    for row in rows {
        let c = row[ci].clone();
        let s = row[si].clone();
        if !conditions.contains(&c) {
            conditions.push(c.clone());
        }
        if !subjects.contains(&s) {
            subjects.push(s.clone());
        }
        cells.insert((c, s), parse_value(&row[vi])?);
    }
    let mut out = Vec::with_capacity(conditions.len());
    for c in &conditions {
        let mut row = Vec::with_capacity(subjects.len());
        for s in &subjects {
            let v = cells.get(&(c.clone(), s.clone())).ok_or_else(|| {
                Error::validation(format!("incomplete matrix: no value for ({c}, {s})"))
            })?;
            row.push(*v);
        }
        out.push(row);
    }
    Ok(out)
}

fn collect_pairs(table: &CsvTable, a_col: &str, b_col: &str) -> Result<Vec<(f64, f64)>> {
    let (headers, rows) = table;
    let ai = column_index(headers, a_col)?;
    let bi = column_index(headers, b_col)?;
    rows.iter()
        .map(|row| Ok((parse_value(&row[ai])?, parse_value(&row[bi])?)))
        .collect()
}
