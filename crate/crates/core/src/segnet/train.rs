//! Grouped splitting, the training loop, and per-scan evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::adam::{adam_step, AdamState};
use super::net::{gradients, predict, ModelParams, Network};
use super::{derive_seed, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{confusion, dataset_score, ConfusionCounts, ScanScore};
use crate::slicer::SliceSample;

/// One line of the training log.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
}

fn group_key(s: &SliceSample) -> String {
    if s.provenance.patient_id.is_empty() {
        format!("scan:{}:{}", s.provenance.dataset_id, s.provenance.scan_id)
    } else {
        format!(
            "pat:{}:{}",
            s.provenance.dataset_id, s.provenance.patient_id
        )
    }
}

/// Split slices into train/validation without letting any patient (or, when
/// patient ids are absent, any scan) straddle the boundary. Groups are
/// shuffled by seed and assigned to train until it holds at least `ratio`
/// of them, always leaving at least one group on each side.
pub fn split_grouped(
    samples: &[SliceSample],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<SliceSample>, Vec<SliceSample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::validation("split ratio must be in (0, 1)"));
    }
    let mut keys: Vec<String> = Vec::new();
    for s in samples {
        let k = group_key(s);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let n = keys.len();
    if n < 2 {
        return Err(Error::validation(format!(
            "need at least 2 groups to split, found {}",
            n
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    keys.shuffle(&mut rng);
    // Smallest train count whose fraction reaches the ratio, with a small
    // slack against floating-point drift, clamped so validation stays
    // nonempty.
    let mut n_train = (1..=n)
        .find(|&t| t as f64 + 1e-9 >= ratio * n as f64)
        .unwrap_or(n);
    n_train = n_train.clamp(1, n - 1);
    let train_keys: std::collections::HashSet<&String> = keys[..n_train].iter().collect();

    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in samples {
        if train_keys.contains(&group_key(s)) {
            train.push(s.clone());
        } else {
            val.push(s.clone());
        }
    }
    Ok((train, val))
}

/// Pool slice predictions into per-scan scores at the given threshold.
pub fn score_by_scan(
    net: &Network,
    params: &ModelParams,
    samples: &[SliceSample],
    threshold: f64,
) -> Result<Vec<ScanScore>> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let preds = predict(net, params, &images, threshold)?;
    let mut by_scan: BTreeMap<String, ConfusionCounts> = BTreeMap::new();
    for (s, pred) in samples.iter().zip(&preds) {
        let key = if s.provenance.dataset_id.is_empty() {
            s.provenance.scan_id.clone()
        } else {
            format!("{}/{}", s.provenance.dataset_id, s.provenance.scan_id)
        };
        let c = confusion(pred.data(), s.mask.data())?;
        by_scan.entry(key).or_default().add(&c);
    }
    Ok(by_scan
        .into_iter()
        .map(|(scan, counts)| ScanScore::from_counts(scan, counts))
        .collect())
}

/// Mean per-scan Dice over scans with nonempty truth; falls back to the
/// globally pooled Dice when every scan's truth is empty.
pub fn validation_dice(
    net: &Network,
    params: &ModelParams,
    samples: &[SliceSample],
    threshold: f64,
) -> Result<f64> {
    let scores = score_by_scan(net, params, samples, threshold)?;
    match dataset_score(&scores) {
        Ok((d, _)) => Ok(d),
        Err(_) => {
            let mut pooled = ConfusionCounts::default();
            for s in &scores {
                pooled.add(&s.counts);
            }
            Ok(crate::metrics::dice(&pooled))
        }
    }
}

/// Split by group, then run the training loop.
pub fn train(samples: &[SliceSample], cfg: &TrainConfig) -> Result<(ModelParams, Vec<EpochLog>)> {
    let (tr, val) = split_grouped(samples, cfg.split_ratio, derive_seed(cfg.seed, "split", 0))?;
    train_with_split(&tr, &val, cfg)
}

/// Mini-batch Adam for `cfg.epochs` epochs over seeded shuffles of the
/// training slices; returns the parameters of the epoch with the highest
/// validation Dice (earlier epoch on ties) plus the per-epoch log.
pub fn train_with_split(
    train_samples: &[SliceSample],
    val_samples: &[SliceSample],
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    cfg.validate()?;
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::validation("empty train or validation split"));
    }
    let net = Network::new(cfg.topology)?;
    let mut params = net.init_params(derive_seed(cfg.seed, "init", 0));
    let mut state = AdamState::new(net.param_count());

    let mut best_params = params.clone();
    let mut best_dice = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_weighted = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<_> = batch.iter().map(|&i| &train_samples[i].image).collect();
            let masks: Vec<_> = batch.iter().map(|&i| &train_samples[i].mask).collect();
            let (loss, grads) = gradients(&net, &params, &images, &masks, cfg.bce_pos_weight)?;
            adam_step(&mut params, &grads, &mut state, cfg)?;
            loss_weighted += loss * batch.len() as f64;
        }
        let train_loss = loss_weighted / train_samples.len() as f64;

        let val_dice = validation_dice(&net, &params, val_samples, cfg.prediction_threshold)?;
        log.push(EpochLog {
            epoch,
            train_loss,
            val_dice,
        });
        if val_dice > best_dice {
            best_dice = val_dice;
            best_params = params.clone();
        }
    }
    Ok((best_params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slicer::{Grid, SliceProvenance};

    fn sample(patient: &str, scan: &str, z: usize) -> SliceSample {
        SliceSample::new(
            Grid::filled(8, 8, 1.0),
            Grid::filled(8, 8, 0u8),
            SliceProvenance {
                dataset_id: "d".into(),
                patient_id: patient.into(),
                scan_id: scan.into(),
                z_index: z,
            },
        )
    }

    #[test]
    fn five_patients_split_four_one() {
        let mut samples = Vec::new();
        for p in 0..5 {
            for z in 0..3 {
                samples.push(sample(&format!("p{p}"), &format!("p{p}s0"), z));
            }
        }
        let (tr, val) = split_grouped(&samples, 0.8, 1).unwrap();
        assert_eq!(tr.len(), 12);
        assert_eq!(val.len(), 3);
        let tr_pat: std::collections::HashSet<_> =
            tr.iter().map(|s| s.provenance.patient_id.clone()).collect();
        for v in &val {
            assert!(!tr_pat.contains(&v.provenance.patient_id));
        }
    }

    #[test]
    fn same_seed_same_split() {
        let samples: Vec<_> = (0..6)
            .flat_map(|p| (0..2).map(move |z| sample(&format!("p{p}"), &format!("s{p}"), z)))
            .collect();
        let (a1, b1) = split_grouped(&samples, 0.8, 99).unwrap();
        let (a2, b2) = split_grouped(&samples, 0.8, 99).unwrap();
        let ids = |v: &[SliceSample]| {
            v.iter()
                .map(|s| (s.provenance.patient_id.clone(), s.provenance.z_index))
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(&a1), ids(&a2));
        assert_eq!(ids(&b1), ids(&b2));
    }

    #[test]
    fn groups_never_straddle_over_many_seeds() {
        let samples: Vec<_> = (0..7)
            .flat_map(|p| (0..3).map(move |z| sample(&format!("p{p}"), &format!("s{p}"), z)))
            .collect();
        for seed in 0..1000 {
            let (tr, val) = split_grouped(&samples, 0.8, seed).unwrap();
            assert!(!tr.is_empty() && !val.is_empty());
            let tr_groups: std::collections::HashSet<_> = tr.iter().map(group_key).collect();
            for v in &val {
                assert!(!tr_groups.contains(&group_key(v)), "seed {}", seed);
            }
        }
    }

    #[test]
    fn scan_grouping_used_when_patient_missing() {
        let samples: Vec<_> = (0..4)
            .flat_map(|s| (0..2).map(move |z| sample("", &format!("s{s}"), z)))
            .collect();
        let (tr, val) = split_grouped(&samples, 0.5, 3).unwrap();
        assert_eq!(tr.len() + val.len(), 8);
        assert!(!val.is_empty());
    }

    #[test]
    fn single_group_rejected() {
        let samples: Vec<_> = (0..3).map(|z| sample("p0", "s0", z)).collect();
        assert!(split_grouped(&samples, 0.8, 0).is_err());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        use crate::segnet::{Topology, TopologyKind};
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(6);
        let mk = |p: usize, rng: &mut rand_chacha::ChaCha20Rng| {
            let img: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            let msk: Vec<u8> = (0..64).map(|_| rng.gen_range(0..=1)).collect();
            SliceSample::new(
                Grid::new(8, 8, img),
                Grid::new(8, 8, msk),
                SliceProvenance {
                    dataset_id: "d".into(),
                    patient_id: format!("p{p}"),
                    scan_id: format!("s{p}"),
                    z_index: 0,
                },
            )
        };
        let samples: Vec<_> = (0..4).map(|p| mk(p, &mut rng)).collect();
        let cfg = TrainConfig {
            topology: Topology {
                kind: TopologyKind::NestedDense,
                depth: 2,
                base_channels: 2,
                channel_multiplier: 2,
            },
            epochs: 3,
            batch_size: 2,
            seed: 123,
            ..TrainConfig::default()
        };
        let (p1, log1) = train(&samples, &cfg).unwrap();
        let (p2, log2) = train(&samples, &cfg).unwrap();
        for (a, b) in p1.data().iter().zip(p2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in log1.iter().zip(&log2) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_dice.to_bits(), b.val_dice.to_bits());
        }
    }
}
