//! Overlap metrics, per-scan and per-dataset aggregation, inter-rater
//! agreement, and consensus fusion.
//!
//! Scores are per-scan quantities: slice-level confusion counts are pooled
//! over the scan before the Dice/IoU formulas are applied, which is the 3D
//! overlap of the stacked 2D predictions (not the mean of per-slice scores).
//! Scans with empty ground truth are flagged and excluded from dataset-level
//! means.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{LabelProvenance, LabelVolume};

/// Pixel-level confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }
}

/// Tally prediction against ground truth. Both buffers are binary and must
/// have the same length.
pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::validation(format!(
            "shape mismatch: pred has {} pixels, truth {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        match (p, t) {
            (1, 1) => c.true_pos += 1,
            (1, 0) => c.false_pos += 1,
            (0, 1) => c.false_neg += 1,
            (0, 0) => c.true_neg += 1,
            _ => {
                return Err(Error::validation(format!(
                    "non-binary value (pred {}, truth {})",
                    p, t
                )))
            }
        }
    }
    Ok(c)
}

/// DSC = 2TP / (2TP + FP + FN); 1.0 when both masks are empty.
pub fn dice(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.true_pos + c.false_pos + c.false_neg;
    if denom == 0 {
        1.0
    } else {
        2.0 * c.true_pos as f64 / denom as f64
    }
}

/// IoU = TP / (TP + FP + FN); 1.0 when both masks are empty.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let denom = c.true_pos + c.false_pos + c.false_neg;
    if denom == 0 {
        1.0
    } else {
        c.true_pos as f64 / denom as f64
    }
}

/// Per-scan score: pooled counts plus the derived overlap metrics.
#[derive(Debug, Clone)]
pub struct ScanScore {
    pub scan_id: String,
    pub dice: f64,
    pub iou: f64,
    pub counts: ConfusionCounts,
    /// Ground truth had no lesion pixels; excluded from dataset means.
    pub empty_truth: bool,
}

impl ScanScore {
    pub fn from_counts(scan_id: impl Into<String>, counts: ConfusionCounts) -> Self {
        ScanScore {
            scan_id: scan_id.into(),
            dice: dice(&counts),
            iou: iou(&counts),
            empty_truth: counts.true_pos + counts.false_neg == 0,
            counts,
        }
    }
}

/// Pool slice-level confusion over a scan, matching prediction and truth
/// slices by z index.
pub fn scan_score(
    pred_slices: &[(usize, &[u8])],
    truth_slices: &[(usize, &[u8])],
    scan_id: &str,
) -> Result<ScanScore> {
    let preds: BTreeMap<usize, &[u8]> = pred_slices.iter().map(|&(z, s)| (z, s)).collect();
    let truths: BTreeMap<usize, &[u8]> = truth_slices.iter().map(|&(z, s)| (z, s)).collect();
    if preds.len() != pred_slices.len() || truths.len() != truth_slices.len() {
        return Err(Error::validation(format!(
            "scan {}: duplicate z index in slice set",
            scan_id
        )));
    }
    if preds.len() != truths.len() || preds.keys().ne(truths.keys()) {
        return Err(Error::validation(format!(
            "scan {}: prediction and truth slice sets differ",
            scan_id
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (z, p) in &preds {
        counts.add(&confusion(p, truths[z])?);
    }
    Ok(ScanScore::from_counts(scan_id, counts))
}

/// Unweighted mean (dice, iou) over scans with nonempty ground truth.
pub fn dataset_score(scores: &[ScanScore]) -> Result<(f64, f64)> {
    let kept: Vec<&ScanScore> = scores.iter().filter(|s| !s.empty_truth).collect();
    if kept.is_empty() {
        return Err(Error::validation(
            "every scan was excluded (empty ground truth); dataset score undefined",
        ));
    }
    let n = kept.len() as f64;
    let d = kept.iter().map(|s| s.dice).sum::<f64>() / n;
    let j = kept.iter().map(|s| s.iou).sum::<f64>() / n;
    Ok((d, j))
}

/// Agreement between raters on one scan.
#[derive(Debug, Clone)]
pub struct RaterAgreement {
    /// Mean Dice over all rater pairs i < j.
    pub pairwise_mean_dice: f64,
    /// Mean Dice of each rater against the consensus, when given.
    pub consensus_mean_dice: Option<f64>,
    pub n_raters: usize,
}

pub fn rater_agreement(
    masks: &[&LabelVolume],
    consensus: Option<&LabelVolume>,
) -> Result<RaterAgreement> {
    if masks.len() < 2 {
        return Err(Error::validation("rater agreement needs at least 2 raters"));
    }
    let dims = masks[0].dims();
    for m in masks.iter().skip(1) {
        if m.dims() != dims {
            return Err(Error::validation(format!(
                "rater mask dims {:?} differ from {:?}",
                m.dims(),
                dims
            )));
        }
    }
    let mut pair_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..masks.len() {
        for j in (i + 1)..masks.len() {
            pair_sum += dice(&confusion(masks[i].labels(), masks[j].labels())?);
            pairs += 1;
        }
    }
    let consensus_mean_dice = match consensus {
        None => None,
        Some(c) => {
            if c.dims() != dims {
                return Err(Error::validation(format!(
                    "consensus dims {:?} differ from {:?}",
                    c.dims(),
                    dims
                )));
            }
            let mut sum = 0.0;
            for m in masks {
                sum += dice(&confusion(m.labels(), c.labels())?);
            }
            Some(sum / masks.len() as f64)
        }
    };
    Ok(RaterAgreement {
        pairwise_mean_dice: pair_sum / pairs as f64,
        consensus_mean_dice,
        n_raters: masks.len(),
    })
}

fn check_fusable(masks: &[&LabelVolume]) -> Result<(usize, usize, usize)> {
    let first = masks
        .first()
        .ok_or_else(|| Error::validation("fusion needs at least 1 mask"))?;
    let dims = first.dims();
    for m in masks.iter().skip(1) {
        if m.dims() != dims {
            return Err(Error::validation(format!(
                "mask dims {:?} differ from {:?}",
                m.dims(),
                dims
            )));
        }
    }
    Ok(dims)
}

/// Pixelwise OR over raters.
pub fn fuse_union(masks: &[&LabelVolume]) -> Result<LabelVolume> {
    let dims = check_fusable(masks)?;
    let n = masks[0].labels().len();
    let mut out = vec![0u8; n];
    for m in masks {
        for (o, &v) in out.iter_mut().zip(m.labels()) {
            *o |= v;
        }
    }
    let fused = LabelVolume::new(dims, out)?;
    Ok(fused.with_provenance(LabelProvenance {
        rater_id: "union".to_string(),
        ..masks[0].provenance.clone()
    }))
}

/// 1 where at least `k` raters marked the pixel.
pub fn fuse_majority(masks: &[&LabelVolume], k: usize) -> Result<LabelVolume> {
    let dims = check_fusable(masks)?;
    if k == 0 || k > masks.len() {
        return Err(Error::validation(format!(
            "majority threshold {} out of range 1..={}",
            k,
            masks.len()
        )));
    }
    let n = masks[0].labels().len();
    let mut votes = vec![0u8; n];
    for m in masks {
        for (o, &v) in votes.iter_mut().zip(m.labels()) {
            *o += v;
        }
    }
    let out: Vec<u8> = votes
        .into_iter()
        .map(|v| u8::from(v as usize >= k))
        .collect();
    let fused = LabelVolume::new(dims, out)?;
    Ok(fused.with_provenance(LabelProvenance {
        rater_id: format!("majority{k}"),
        ..masks[0].provenance.clone()
    }))
}

/// One exported score line.
#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub train_set: String,
    pub test_set: String,
    pub score: ScanScore,
}

/// Write per-scan scores as CSV:
/// train_set,test_set,scan_id,dice,iou,tp,fp,fn,tn,excluded
pub fn write_scores_csv(path: impl AsRef<Path>, rows: &[ScoreRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "train_set,test_set,scan_id,dice,iou,tp,fp,fn,tn,excluded"
    )?;
    for r in rows {
        let c = &r.score.counts;
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{},{},{},{},{}",
            r.train_set,
            r.test_set,
            r.score.scan_id,
            r.score.dice,
            r.score.iou,
            c.true_pos,
            c.false_pos,
            c.false_neg,
            c.true_neg,
            r.score.empty_truth
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_identity_masks() {
        let m: Vec<u8> = (0..16).map(|i| u8::from(i < 5)).collect();
        let c = confusion(&m, &m).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                true_pos: 5,
                false_pos: 0,
                false_neg: 0,
                true_neg: 11
            }
        );
    }

    #[test]
    fn confusion_all_ones_vs_all_zeros() {
        let c = confusion(&[1u8; 16], &[0u8; 16]).unwrap();
        assert_eq!(c.false_pos, 16);
        assert_eq!(c.true_pos + c.false_neg + c.true_neg, 0);
    }

    #[test]
    fn dice_iou_formulas() {
        let c = ConfusionCounts {
            true_pos: 2,
            false_pos: 1,
            false_neg: 1,
            true_neg: 0,
        };
        assert!((dice(&c) - 4.0 / 6.0).abs() < 1e-12);
        assert!((iou(&c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identical_and_disjoint_masks() {
        let a: Vec<u8> = (0..8).map(|i| u8::from(i < 4)).collect();
        let b: Vec<u8> = (0..8).map(|i| u8::from(i >= 4)).collect();
        let same = confusion(&a, &a).unwrap();
        assert_eq!(dice(&same), 1.0);
        assert_eq!(iou(&same), 1.0);
        let disj = confusion(&a, &b).unwrap();
        assert_eq!(dice(&disj), 0.0);
        assert_eq!(iou(&disj), 0.0);
    }

    #[test]
    fn both_empty_convention() {
        let c = confusion(&[0u8; 9], &[0u8; 9]).unwrap();
        assert_eq!(dice(&c), 1.0);
        assert_eq!(iou(&c), 1.0);
        let s = ScanScore::from_counts("s", c);
        assert!(s.empty_truth);
    }

    #[test]
    fn scan_pooling_is_not_mean_of_slices() {
        // counts (1,0,1) and (1,2,0) pool to DSC 4/7.
        let p0: &[u8] = &[1, 0];
        let t0: &[u8] = &[1, 1];
        let p1: &[u8] = &[1, 1, 1];
        let t1: &[u8] = &[1, 0, 0];
        let s = scan_score(&[(0, p0), (1, p1)], &[(0, t0), (1, t1)], "s").unwrap();
        assert!((s.dice - 4.0 / 7.0).abs() < 1e-12, "dice = {}", s.dice);
        assert_eq!(
            s.counts,
            ConfusionCounts {
                true_pos: 2,
                false_pos: 2,
                false_neg: 1,
                true_neg: 0
            }
        );
    }

    #[test]
    fn scan_score_single_slice_equals_slice_dice() {
        let p: &[u8] = &[1, 1, 0, 0];
        let t: &[u8] = &[1, 0, 1, 0];
        let s = scan_score(&[(3, p)], &[(3, t)], "s").unwrap();
        assert!((s.dice - dice(&confusion(p, t).unwrap())).abs() < 1e-15);
    }

    #[test]
    fn scan_score_rejects_mismatched_slice_sets() {
        let p: &[u8] = &[1];
        let t: &[u8] = &[1];
        assert!(scan_score(&[(0, p)], &[(1, t)], "s").is_err());
    }

    #[test]
    fn dataset_score_excludes_empty_truth() {
        let full = ScanScore::from_counts(
            "a",
            ConfusionCounts {
                true_pos: 1,
                false_pos: 0,
                false_neg: 0,
                true_neg: 3,
            },
        );
        let empty = ScanScore::from_counts(
            "b",
            ConfusionCounts {
                true_pos: 0,
                false_pos: 2,
                false_neg: 0,
                true_neg: 2,
            },
        );
        assert!(empty.empty_truth);
        let (d, j) = dataset_score(&[full.clone(), empty.clone()]).unwrap();
        assert_eq!((d, j), (1.0, 1.0));
        assert!(dataset_score(&[empty]).is_err());
        let (d1, _) = dataset_score(&[full]).unwrap();
        assert_eq!(d1, 1.0);
    }

    #[test]
    fn table_style_dataset_means() {
        let mk = |id: &str, d: f64| ScanScore {
            scan_id: id.into(),
            dice: d,
            iou: 0.0,
            counts: ConfusionCounts::default(),
            empty_truth: false,
        };
        let (m1, _) = dataset_score(&[mk("a", 0.602), mk("b", 0.523), mk("c", 0.569)]).unwrap();
        assert!((m1 - 0.5647).abs() < 1e-4, "{}", m1);
        let (m2, _) = dataset_score(&[mk("a", 0.544), mk("b", 0.606), mk("c", 0.603)]).unwrap();
        assert!((m2 - 0.5843).abs() < 1e-4, "{}", m2);
    }

    fn lv(labels: Vec<u8>) -> LabelVolume {
        let n = labels.len();
        LabelVolume::new((n, 1, 1), labels).unwrap()
    }

    #[test]
    fn rater_agreement_identical_and_disjoint() {
        let a = lv(vec![1, 1, 0, 0]);
        let same = rater_agreement(&[&a, &a], None).unwrap();
        assert_eq!(same.pairwise_mean_dice, 1.0);
        let b = lv(vec![0, 0, 1, 1]);
        let disj = rater_agreement(&[&a, &b], None).unwrap();
        assert_eq!(disj.pairwise_mean_dice, 0.0);
    }

    #[test]
    fn rater_agreement_matches_brute_force_pairs() {
        let a = lv(vec![1, 1, 0, 0, 1, 0, 1, 0, 0, 0, 1, 1, 0, 1, 0, 1]);
        let b = lv(vec![1, 0, 0, 1, 1, 0, 0, 0, 1, 0, 1, 0, 0, 1, 1, 1]);
        let c = lv(vec![0, 1, 1, 0, 1, 1, 1, 0, 0, 0, 0, 1, 0, 1, 0, 0]);
        let got = rater_agreement(&[&a, &b, &c], Some(&a)).unwrap();
        let d =
            |x: &LabelVolume, y: &LabelVolume| dice(&confusion(x.labels(), y.labels()).unwrap());
        let want = (d(&a, &b) + d(&a, &c) + d(&b, &c)) / 3.0;
        assert!((got.pairwise_mean_dice - want).abs() < 1e-15);
        let want_cons = (d(&a, &a) + d(&b, &a) + d(&c, &a)) / 3.0;
        assert!((got.consensus_mean_dice.unwrap() - want_cons).abs() < 1e-15);
    }

    #[test]
    fn union_and_majority() {
        let a = lv(vec![1, 0, 0, 1]);
        let b = lv(vec![0, 0, 1, 1]);
        let c = lv(vec![1, 0, 0, 0]);
        let u = fuse_union(&[&a, &a]).unwrap();
        assert_eq!(u.labels(), a.labels());
        let u = fuse_union(&[&a, &b, &c]).unwrap();
        assert_eq!(u.labels(), &[1, 0, 1, 1]);
        // pixel 0 marked by raters {a, c} -> k=2 keeps it; pixel 2 by {b} only -> dropped
        let m = fuse_majority(&[&a, &b, &c], 2).unwrap();
        assert_eq!(m.labels(), &[1, 0, 0, 1]);
        assert!(fuse_majority(&[&a], 2).is_err());
    }

    proptest! {
        #[test]
        fn confusion_matches_brute_force(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let pred: Vec<u8> = (0..256).map(|_| rng.gen_range(0..=1)).collect();
            let truth: Vec<u8> = (0..256).map(|_| rng.gen_range(0..=1)).collect();
            let c = confusion(&pred, &truth).unwrap();
            let mut want = ConfusionCounts::default();
            for i in 0..256 {
                if pred[i] == 1 && truth[i] == 1 { want.true_pos += 1; }
                if pred[i] == 1 && truth[i] == 0 { want.false_pos += 1; }
                if pred[i] == 0 && truth[i] == 1 { want.false_neg += 1; }
                if pred[i] == 0 && truth[i] == 0 { want.true_neg += 1; }
            }
            prop_assert_eq!(c, want);
            prop_assert_eq!(c.total(), 256);
        }

        #[test]
        fn dice_iou_identity_and_symmetry(
            tp in 0u64..50, fp in 0u64..50, fneg in 0u64..50, tn in 0u64..50
        ) {
            let c = ConfusionCounts { true_pos: tp, false_pos: fp, false_neg: fneg, true_neg: tn };
            let d = dice(&c);
            let j = iou(&c);
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
            prop_assert!(j <= d + 1e-15);
            // Swapping pred and truth swaps FP and FN, which the formulas ignore.
            let swapped = ConfusionCounts { true_pos: tp, false_pos: fneg, false_neg: fp, true_neg: tn };
            prop_assert_eq!(dice(&swapped).to_bits(), d.to_bits());
        }

        #[test]
        fn union_superset_and_majority_k_equals_and(seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let masks: Vec<LabelVolume> = (0..3)
                .map(|_| lv((0..64).map(|_| rng.gen_range(0..=1)).collect()))
                .collect();
            let refs: Vec<&LabelVolume> = masks.iter().collect();
            let u = fuse_union(&refs).unwrap();
            for m in &masks {
                for (&uu, &mm) in u.labels().iter().zip(m.labels()) {
                    prop_assert!(uu >= mm);
                }
            }
            let all = fuse_majority(&refs, 3).unwrap();
            for i in 0..64 {
                let want = masks.iter().all(|m| m.labels()[i] == 1);
                prop_assert_eq!(all.labels()[i] == 1, want);
            }
        }
    }
}
