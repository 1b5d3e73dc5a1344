//! Intensity harmonization.
//!
//! Scanners and acquisition settings shift MRI intensity distributions in
//! ways that a segmentation model trained on one dataset does not survive.
//! Quantile normalization maps each scan's intensity ranks onto a shared
//! template quantile curve, so every normalized scan has (up to ties) the
//! same distribution. Linear [0,1] scaling is kept as the ablation baseline.
//!
//! Background is defined as exactly-zero voxels: inputs are skull-stripped,
//! so zeros dominate and would swamp the quantile curve. They are excluded
//! from rank computation and pinned to zero in the output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// A monotone quantile curve defining the target intensity distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntensityTemplate {
    /// Resolution of the quantile curve.
    #[serde(rename = "M")]
    pub m: usize,
    /// Template quantiles, monotone nondecreasing, length `m`.
    pub quantiles: Vec<f64>,
    /// Scans the template was built from.
    pub source_ids: Vec<String>,
}

impl IntensityTemplate {
    pub fn new(quantiles: Vec<f64>, source_ids: Vec<String>) -> Result<Self> {
        if quantiles.len() < 2 {
            return Err(Error::validation("template needs at least 2 quantiles"));
        }
        if quantiles.iter().any(|q| !q.is_finite()) {
            return Err(Error::numerical("non-finite template quantile"));
        }
        if quantiles[0] < 0.0 {
            return Err(Error::validation("template quantiles must be nonnegative"));
        }
        if quantiles.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::validation(
                "template quantiles must be nondecreasing",
            ));
        }
        Ok(IntensityTemplate {
            m: quantiles.len(),
            quantiles,
            source_ids,
        })
    }

    /// Quantile function at fractional rank `r` in [0,1], linear between
    /// the stored quantiles.
    pub fn at(&self, r: f64) -> f64 {
        let m = self.quantiles.len();
        let pos = r.clamp(0.0, 1.0) * (m - 1) as f64;
        let lo = pos.floor() as usize;
        if lo + 1 >= m {
            return self.quantiles[m - 1];
        }
        let frac = pos - lo as f64;
        self.quantiles[lo] + frac * (self.quantiles[lo + 1] - self.quantiles[lo])
    }

    /// Piecewise-linear CDF of the template distribution, with jumps where
    /// the curve is flat.
    pub fn cdf(&self, x: f64) -> f64 {
        let q = &self.quantiles;
        let m = q.len();
        if x < q[0] {
            return 0.0;
        }
        if x >= q[m - 1] {
            return 1.0;
        }
        // Last segment start with q[k] <= x < q[k+1].
        let mut k = match q.partition_point(|&v| v <= x) {
            0 => 0,
            p => p - 1,
        };
        while k + 1 < m && q[k + 1] <= x {
            k += 1;
        }
        let denom = q[k + 1] - q[k];
        let frac = if denom > 0.0 { (x - q[k]) / denom } else { 1.0 };
        (k as f64 + frac) / (m - 1) as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: IntensityTemplate = serde_json::from_str(s)?;
        IntensityTemplate::new(t.quantiles, t.source_ids)
    }
}

fn nonzero_sorted(v: &Volume) -> Vec<f64> {
    let mut vals: Vec<f64> = v.voxels().iter().copied().filter(|&x| x != 0.0).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals
}

/// Empirical quantile of a sorted sample at rank `p` in [0,1], linear
/// interpolation between order statistics.
fn sample_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Build the template as the per-rank mean of the volumes' empirical
/// quantile functions, sampled at `m` evenly spaced ranks.
pub fn build_template(volumes: &[Volume], m: usize) -> Result<IntensityTemplate> {
    if volumes.is_empty() {
        return Err(Error::validation("cannot build a template from no volumes"));
    }
    if m < 2 {
        return Err(Error::validation("template resolution must be at least 2"));
    }
    let mut acc = vec![0.0f64; m];
    let mut source_ids = Vec::with_capacity(volumes.len());
    for v in volumes {
        let sorted = nonzero_sorted(v);
        if sorted.len() < m {
            return Err(Error::validation(format!(
                "scan {} has {} nonzero voxels, fewer than the template resolution {}",
                v.provenance.scan_id,
                sorted.len(),
                m
            )));
        }
        for (k, a) in acc.iter_mut().enumerate() {
            *a += sample_quantile(&sorted, k as f64 / (m - 1) as f64);
        }
        source_ids.push(v.provenance.scan_id.clone());
    }
    let n = volumes.len() as f64;
    let quantiles: Vec<f64> = acc.into_iter().map(|a| a / n).collect();
    IntensityTemplate::new(quantiles, source_ids)
}

/// Average fractional ranks in [0,1] of the nonzero voxels, ties sharing
/// the mean of their ranks. Returns (flat voxel index, rank) pairs.
fn fractional_ranks(v: &Volume) -> Vec<(usize, f64)> {
    let mut indexed: Vec<(usize, f64)> = v
        .voxels()
        .iter()
        .enumerate()
        .filter(|(_, &x)| x != 0.0)
        .map(|(i, &x)| (i, x))
        .collect();
    indexed.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let n = indexed.len();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && indexed[j].1 == indexed[i].1 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged, mapped to [0,1].
        let avg_rank = (i + j + 1) as f64 / 2.0;
        let r = if n == 1 {
            0.5
        } else {
            (avg_rank - 1.0) / (n - 1) as f64
        };
        for &(idx, _) in &indexed[i..j] {
            out.push((idx, r));
        }
        i = j;
    }
    out
}

/// Map each nonzero voxel onto the template quantile at its fractional
/// rank. Zero voxels stay zero; rank order is preserved.
pub fn quantile_normalize(v: &Volume, t: &IntensityTemplate) -> Result<Volume> {
    let ranks = fractional_ranks(v);
    if ranks.is_empty() {
        return Err(Error::validation(format!(
            "scan {} is all zero; nothing to normalize",
            v.provenance.scan_id
        )));
    }
    let mut out = vec![0.0f64; v.voxels().len()];
    for &(idx, r) in &ranks {
        out[idx] = t.at(r);
    }
    v.with_voxels(out)
}

/// Scale all voxels (including zeros) linearly onto [0,1].
pub fn linear_normalize(v: &Volume) -> Result<Volume> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &x in v.voxels() {
        min = min.min(x);
        max = max.max(x);
    }
    if max == min {
        return Err(Error::validation(format!(
            "scan {} is constant; linear normalization undefined",
            v.provenance.scan_id
        )));
    }
    let scale = 1.0 / (max - min);
    let out = v.voxels().iter().map(|&x| (x - min) * scale).collect();
    v.with_voxels(out)
}

/// Kolmogorov-Smirnov distance between the empirical CDF of the volume's
/// nonzero voxels and the template's piecewise-linear CDF.
pub fn ks_distance(v: &Volume, t: &IntensityTemplate) -> Result<f64> {
    let sorted = nonzero_sorted(v);
    if sorted.is_empty() {
        return Err(Error::validation("all-zero volume has no distribution"));
    }
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    // The empirical CDF steps at sample points and both CDFs are monotone,
    // so the supremum is attained at a sample point, approached from either
    // side.
    for (i, &x) in sorted.iter().enumerate() {
        let ft = t.cdf(x);
        let above = (i + 1) as f64 / n;
        let below = i as f64 / n;
        d = d.max((above - ft).abs()).max((below - ft).abs());
    }
    Ok(d)
}
