//! Synthetic phantom scans: ellipsoidal two-tissue "brains" with known
//! hyperintense lesions, a smooth intensity field, and a per-site intensity
//! warp plus noise that stand in for scanner differences.
//!
//! Anatomy and lesions derive only from the profile's structural seed, so
//! two profiles that differ in warp or noise settings produce identical
//! ground-truth masks over the same seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::segnet::derive_seed;
use crate::volume::{save_label_volume, save_volume, LabelVolume, Provenance, Volume};

/// Intensity of white matter before field, warp and noise.
const WHITE: f64 = 1.0;
const GRAY: f64 = 0.65;
/// Lesions are 2.2x the white-matter level, comfortably past the 1.3x
/// hyperintensity floor even under the +-12% smooth field.
const LESION: f64 = 2.2;
const FIELD_AMPLITUDE: f64 = 0.12;
/// Floor for noisy brain voxels; exactly-zero means background.
const BRAIN_FLOOR: f64 = 1e-3;

/// One synthetic site: its intensity warp, noise level, lesion load, and
/// structural seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomProfile {
    pub site_id: String,
    /// Warp exponent; the warp is offset + gain * v^gamma on nonzero
    /// voxels, strictly increasing.
    pub gamma: f64,
    pub gain: f64,
    pub offset: f64,
    pub noise_sigma: f64,
    pub lesion_count_range: (usize, usize),
    pub lesion_radius_range_mm: (f64, f64),
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub seed: u64,
}

impl PhantomProfile {
    pub fn validate(&self) -> Result<()> {
        let (nx, ny, nz) = self.dims;
        if nx < 8 || ny < 8 || nz < 2 {
            return Err(Error::validation(format!(
                "degenerate phantom dims {:?}",
                self.dims
            )));
        }
        if self.gamma <= 0.0 || self.gain <= 0.0 || self.offset < 0.0 {
            return Err(Error::validation(
                "warp must be strictly increasing: gamma > 0, gain > 0, offset >= 0",
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::validation("noise_sigma must be nonnegative"));
        }
        if self.lesion_count_range.0 > self.lesion_count_range.1
            || self.lesion_radius_range_mm.0 > self.lesion_radius_range_mm.1
            || self.lesion_radius_range_mm.0 <= 0.0
        {
            return Err(Error::validation("bad lesion ranges"));
        }
        Ok(())
    }

    pub fn warp(&self, v: f64) -> f64 {
        if v == 0.0 {
            0.0
        } else {
            self.offset + self.gain * v.powf(self.gamma)
        }
    }
}

fn range_sample(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Box-Muller standard normal; two uniform draws per value keeps the
/// stream position deterministic.
fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

struct Ellipsoid {
    center: (f64, f64, f64),
    semi: (f64, f64, f64),
}

impl Ellipsoid {
    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let dx = (x - self.center.0) / self.semi.0;
        let dy = (y - self.center.1) / self.semi.1;
        let dz = (z - self.center.2) / self.semi.2;
        dx * dx + dy * dy + dz * dz < 1.0
    }
}

/// Generate one scan: (image, mask), deterministic in (profile.seed,
/// scan_index); the mask depends only on the structural stream.
pub fn generate_phantom_scan(
    profile: &PhantomProfile,
    scan_index: usize,
) -> Result<(Volume, LabelVolume)> {
    profile.validate()?;
    let (nx, ny, nz) = profile.dims;
    let (sx, sy, sz) = profile.spacing;
    let mut structure = ChaCha20Rng::seed_from_u64(derive_seed(
        profile.seed,
        "phantom-structure",
        scan_index as u64,
    ));

    let jitter = |rng: &mut ChaCha20Rng| 1.0 + rng.gen_range(-0.05..0.05);
    let brain = Ellipsoid {
        center: (
            nx as f64 / 2.0 + structure.gen_range(-1.5..1.5),
            ny as f64 / 2.0 + structure.gen_range(-1.5..1.5),
            nz as f64 / 2.0 + structure.gen_range(-0.5..0.5),
        ),
        semi: (
            0.42 * nx as f64 * jitter(&mut structure),
            0.44 * ny as f64 * jitter(&mut structure),
            0.46 * nz as f64 * jitter(&mut structure),
        ),
    };
    let white = Ellipsoid {
        center: brain.center,
        semi: (
            brain.semi.0 * 0.72,
            brain.semi.1 * 0.72,
            brain.semi.2 * 0.72,
        ),
    };

    // Smooth multiplicative field, one low-frequency plane wave.
    let amp = structure.gen_range(0.05..FIELD_AMPLITUDE);
    let (fx, fy, fz) = (
        structure.gen_range(0.5..1.5),
        structure.gen_range(0.5..1.5),
        structure.gen_range(0.25..0.75),
    );
    let phase = structure.gen_range(0.0..std::f64::consts::TAU);

    let n_lesions =
        structure.gen_range(profile.lesion_count_range.0..=profile.lesion_count_range.1);
    let mut lesions = Vec::with_capacity(n_lesions);
    let mut guard = 0;
    while lesions.len() < n_lesions && guard < 10_000 {
        guard += 1;
        let cx = structure.gen_range(0.0..nx as f64);
        let cy = structure.gen_range(0.0..ny as f64);
        let cz = structure.gen_range(0.0..nz as f64);
        if !white.contains(cx, cy, cz) {
            continue;
        }
        let r_mm = range_sample(
            &mut structure,
            profile.lesion_radius_range_mm.0,
            profile.lesion_radius_range_mm.1,
        );
        lesions.push(Ellipsoid {
            center: (cx, cy, cz),
            semi: (
                (r_mm / sx) * jitter(&mut structure),
                (r_mm / sy) * jitter(&mut structure),
                (r_mm / sz).max(0.5) * jitter(&mut structure),
            ),
        });
    }

    let mut voxels = vec![0.0f64; nx * ny * nz];
    let mut labels = vec![0u8; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (xf, yf, zf) = (x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5);
                if !brain.contains(xf, yf, zf) {
                    continue;
                }
                let idx = x + nx * (y + ny * z);
                let field = 1.0
                    + amp
                        * (std::f64::consts::TAU
                            * (fx * xf / nx as f64 + fy * yf / ny as f64 + fz * zf / nz as f64)
                            + phase)
                            .sin();
                let lesion = lesions.iter().any(|l| l.contains(xf, yf, zf));
                let tissue = if lesion {
                    labels[idx] = 1;
                    LESION
                } else if white.contains(xf, yf, zf) {
                    WHITE
                } else {
                    GRAY
                };
                voxels[idx] = tissue * field;
            }
        }
    }

    // Site effects on the image only: warp, then additive noise.
    let mut noise = ChaCha20Rng::seed_from_u64(derive_seed(
        profile.seed,
        "phantom-noise",
        scan_index as u64,
    ));
    for v in voxels.iter_mut() {
        if *v == 0.0 {
            continue;
        }
        let mut out = profile.warp(*v);
        if profile.noise_sigma > 0.0 {
            out += profile.noise_sigma * gaussian(&mut noise);
        }
        *v = out.max(BRAIN_FLOOR);
    }

    let scan_id = format!("{}_scan{:02}", profile.site_id, scan_index);
    let vol = Volume::new(profile.dims, profile.spacing, voxels)?.with_provenance(Provenance {
        dataset_id: profile.site_id.clone(),
        patient_id: format!("{}_p{:02}", profile.site_id, scan_index),
        scan_id: scan_id.clone(),
        modality: "FLAIR".into(),
    });
    let mask = LabelVolume::new(profile.dims, labels)?;
    Ok((vol, mask))
}

/// Generate a site's scans on disk and hand back its manifest.
pub fn generate_phantom_dataset(
    profile: &PhantomProfile,
    n_scans: usize,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    if n_scans == 0 {
        return Err(Error::validation("n_scans must be at least 1"));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(n_scans);
    for i in 0..n_scans {
        let (vol, mask) = generate_phantom_scan(profile, i)?;
        let image_path = format!("{}_scan{:02}.nii", profile.site_id, i);
        let mask_path = format!("{}_scan{:02}_mask.nii", profile.site_id, i);
        save_volume(&vol, out_dir.join(&image_path))?;
        save_label_volume(&mask, out_dir.join(&mask_path))?;
        entries.push(ManifestEntry {
            patient_id: vol.provenance.patient_id.clone(),
            scan_id: vol.provenance.scan_id.clone(),
            center_tag: profile.site_id.clone(),
            image_path,
            mask_paths: vec![mask_path],
            consensus_path: None,
        });
    }
    let manifest = DatasetManifest {
        dataset_id: profile.site_id.clone(),
        heterogeneous: false,
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    Ok(manifest)
}

/// The default four-site suite: one identity-warp reference site and three
/// sites whose gains, offsets and mild gamma warps shift where tissue
/// classes land in a linearly normalized [0,1] range (the offsets compress
/// relative contrast differently per site) while leaving rank order, and
/// hence quantile normalization, untouched.
pub fn default_site_profiles(suite_seed: u64) -> Vec<PhantomProfile> {
    let dims = (64, 64, 24);
    let spacing = (3.0, 3.0, 5.0);
    let base = PhantomProfile {
        site_id: String::new(),
        gamma: 1.0,
        gain: 1.0,
        offset: 0.0,
        noise_sigma: 0.02,
        lesion_count_range: (4, 7),
        lesion_radius_range_mm: (8.0, 14.0),
        dims,
        spacing,
        seed: 0,
    };
    let mut sites = vec![
        PhantomProfile {
            site_id: "site_a".into(),
            ..base.clone()
        },
        PhantomProfile {
            site_id: "site_b".into(),
            gamma: 0.9,
            gain: 1.6,
            offset: 0.8,
            noise_sigma: 0.03,
            ..base.clone()
        },
        PhantomProfile {
            site_id: "site_c".into(),
            gamma: 1.25,
            gain: 0.7,
            offset: 0.1,
            noise_sigma: 0.025,
            ..base.clone()
        },
        PhantomProfile {
            site_id: "site_d".into(),
            gamma: 0.8,
            gain: 1.0,
            offset: 1.5,
            noise_sigma: 0.04,
            ..base
        },
    ];
    for (i, s) in sites.iter_mut().enumerate() {
        s.seed = derive_seed(suite_seed, "phantom-site", i as u64);
    }
    sites
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonize::{build_template, ks_distance};

    fn test_profile() -> PhantomProfile {
        PhantomProfile {
            site_id: "t".into(),
            gamma: 1.0,
            gain: 1.0,
            offset: 0.0,
            noise_sigma: 0.0,
            lesion_count_range: (2, 4),
            lesion_radius_range_mm: (4.0, 8.0),
            dims: (32, 32, 12),
            spacing: (3.0, 3.0, 5.0),
            seed: 7,
        }
    }

    #[test]
    fn lesions_are_exactly_the_hyperintense_voxels() {
        // Zero noise, identity warp: the brightest voxels are the lesion
        // voxels and nothing else.
        let (vol, mask) = generate_phantom_scan(&test_profile(), 0).unwrap();
        assert!(mask.lesion_voxels() > 0, "fixture must contain lesions");
        let threshold = LESION * (1.0 - FIELD_AMPLITUDE) - 1e-9;
        for (i, (&v, &m)) in vol.voxels().iter().zip(mask.labels()).enumerate() {
            if m == 1 {
                assert!(v >= threshold, "lesion voxel {} dim at {}", i, v);
            } else {
                assert!(v < threshold, "non-lesion voxel {} bright at {}", i, v);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let p = test_profile();
        let (v1, m1) = generate_phantom_scan(&p, 3).unwrap();
        let (v2, m2) = generate_phantom_scan(&p, 3).unwrap();
        assert_eq!(v1.voxels(), v2.voxels());
        assert_eq!(m1.labels(), m2.labels());
    }

    #[test]
    fn masks_invariant_to_warp_but_histograms_differ() {
        let a = test_profile();
        let mut b = test_profile();
        b.gamma = 0.6;
        b.gain = 2.0;
        b.offset = 0.3;
        let (va, ma) = generate_phantom_scan(&a, 1).unwrap();
        let (vb, mb) = generate_phantom_scan(&b, 1).unwrap();
        assert_eq!(
            ma.labels(),
            mb.labels(),
            "ground truth must not see the warp"
        );
        let t = build_template(&[va], 64).unwrap();
        let d = ks_distance(&vb, &t).unwrap();
        assert!(
            d > 0.1,
            "warped site should have a shifted histogram, ks = {}",
            d
        );
    }

    #[test]
    fn dataset_generation_writes_manifest_and_files() {
        let dir = std::env::temp_dir().join(format!("phantom-{}", std::process::id()));
        let m = generate_phantom_dataset(&test_profile(), 2, &dir).unwrap();
        assert_eq!(m.entries.len(), 2);
        for e in &m.entries {
            assert!(m.resolve(&e.image_path).exists());
            assert!(m.resolve(&e.mask_paths[0]).exists());
        }
        let vol = crate::volume::load_volume(m.resolve(&m.entries[0].image_path)).unwrap();
        assert_eq!(vol.dims(), (32, 32, 12));
    }

    #[test]
    fn profile_validation() {
        let mut p = test_profile();
        p.gamma = 0.0;
        assert!(p.validate().is_err());
        let mut p = test_profile();
        p.noise_sigma = -1.0;
        assert!(p.validate().is_err());
    }
}
