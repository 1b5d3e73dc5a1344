//! Dataset manifests: a JSON index of scans, masks and center tags, with
//! paths resolved relative to the manifest file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub scan_id: String,
    /// Acquisition center; empty means untagged.
    #[serde(default)]
    pub center_tag: String,
    pub image_path: String,
    /// One mask per rater, at least one.
    pub mask_paths: Vec<String>,
    /// Optional fused ground truth; evaluation prefers it when present.
    #[serde(default)]
    pub consensus_path: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    #[serde(default)]
    pub heterogeneous: bool,
    pub entries: Vec<ManifestEntry>,
    /// Directory the relative paths resolve against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.dataset_id.is_empty() {
            return Err(Error::validation("manifest needs a dataset_id"));
        }
        let mut keys = HashSet::new();
        let mut paths = HashSet::new();
        for e in &self.entries {
            if !keys.insert((e.patient_id.clone(), e.scan_id.clone())) {
                return Err(Error::validation(format!(
                    "duplicate (patient, scan) = ({}, {}) in dataset {}",
                    e.patient_id, e.scan_id, self.dataset_id
                )));
            }
            if e.mask_paths.is_empty() {
                return Err(Error::validation(format!(
                    "scan {} has no masks",
                    e.scan_id
                )));
            }
            for p in std::iter::once(&e.image_path)
                .chain(e.mask_paths.iter())
                .chain(e.consensus_path.iter())
            {
                if !paths.insert(p.clone()) {
                    return Err(Error::validation(format!("path {} listed twice", p)));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Ground-truth mask path for evaluation: the consensus when present,
    /// otherwise the first rater.
    pub fn truth_path(entry: &ManifestEntry) -> &str {
        entry
            .consensus_path
            .as_deref()
            .unwrap_or_else(|| entry.mask_paths[0].as_str())
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
    let mut m: DatasetManifest = serde_json::from_str(&text)?;
    m.base_dir = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    m.validate()?;
    Ok(m)
}

pub fn save_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    m.validate()?;
    std::fs::write(path, serde_json::to_string_pretty(m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(p: &str, s: &str, img: &str) -> ManifestEntry {
        ManifestEntry {
            patient_id: p.into(),
            scan_id: s.into(),
            center_tag: String::new(),
            image_path: img.into(),
            mask_paths: vec![format!("{img}.mask")],
            consensus_path: None,
        }
    }

    #[test]
    fn duplicate_scan_rejected() {
        let m = DatasetManifest {
            dataset_id: "d".into(),
            heterogeneous: false,
            entries: vec![entry("p1", "s1", "a.nii"), entry("p1", "s1", "b.nii")],
            base_dir: PathBuf::new(),
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn duplicate_path_rejected() {
        let mut e2 = entry("p2", "s2", "a.nii");
        e2.mask_paths = vec!["m2.nii".into()];
        let m = DatasetManifest {
            dataset_id: "d".into(),
            heterogeneous: false,
            entries: vec![entry("p1", "s1", "a.nii"), e2],
            base_dir: PathBuf::new(),
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn round_trip_and_resolution() {
        let dir = std::env::temp_dir().join(format!("manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let m = DatasetManifest {
            dataset_id: "site_a".into(),
            heterogeneous: true,
            entries: vec![entry("p1", "s1", "scans/s1.nii")],
            base_dir: PathBuf::new(),
        };
        let path = dir.join("site_a.manifest.json");
        save_manifest(&m, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.dataset_id, "site_a");
        assert_eq!(back.resolve("scans/s1.nii"), dir.join("scans/s1.nii"));
    }
}
