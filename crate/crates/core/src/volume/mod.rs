//! 3D scan and lesion-mask data model with NIfTI-1 and raw-format I/O.
//!
//! Voxels are stored x-fastest (the NIfTI on-disk order). Intensity volumes
//! hold finite nonnegative values (magnitude images); label volumes are
//! strictly binary.

mod nifti;
mod raw;

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Where a scan came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    pub dataset_id: String,
    pub patient_id: String,
    pub scan_id: String,
    pub modality: String,
}

/// Where a mask came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelProvenance {
    pub dataset_id: String,
    pub patient_id: String,
    pub scan_id: String,
    pub rater_id: String,
}

/// How the third (slicing) axis relates to the scanner's inferior-superior
/// direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Header metadata confirms the third voxel axis is the scanner z axis.
    Axial,
    /// Axes were permuted on load so the third axis is scanner z; the
    /// permutation maps stored axes back to file axes.
    AxialPermuted([usize; 3]),
    /// No usable orientation metadata; voxels stored exactly as in the file.
    Unknown,
}

impl Orientation {
    pub fn is_known(&self) -> bool {
        !matches!(self, Orientation::Unknown)
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Orientation::Axial => write!(f, "axial"),
            Orientation::AxialPermuted(p) => write!(f, "axial(permuted {:?})", p),
            Orientation::Unknown => write!(f, "unknown"),
        }
    }
}

/// A 3D intensity grid with voxel spacing in millimeters.
#[derive(Debug, Clone)]
pub struct Volume {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    voxels: Vec<f64>,
    pub provenance: Provenance,
    pub orientation: Orientation,
}

impl Volume {
    /// Build a volume, checking the type invariants: voxel count matches
    /// dims, all values finite and nonnegative, spacing positive.
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        voxels: Vec<f64>,
    ) -> Result<Self> {
        let (nx, ny, nz) = dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::validation(format!("degenerate dims {:?}", dims)));
        }
        let n = nx * ny * nz;
        if voxels.len() != n {
            return Err(Error::validation(format!(
                "voxel count {} does not match dims {:?} ({} expected)",
                voxels.len(),
                dims,
                n
            )));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::validation(format!(
                "nonpositive spacing {:?}",
                spacing
            )));
        }
        for (i, &v) in voxels.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "non-finite voxel {} at index {}",
                    v, i
                )));
            }
            if v < 0.0 {
                return Err(Error::data(format!(
                    "negative voxel {} at index {} (magnitude image expected)",
                    v, i
                )));
            }
        }
        Ok(Volume {
            dims,
            spacing,
            voxels,
            provenance: Provenance::default(),
            orientation: Orientation::Axial,
        })
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = p;
        self
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn voxel(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    /// The constant-z plane as a row-major (y, x) buffer of nx*ny values.
    pub fn plane(&self, z: usize) -> &[f64] {
        let n = self.dims.0 * self.dims.1;
        &self.voxels[z * n..(z + 1) * n]
    }

    /// Replace the voxel payload, keeping dims/spacing/provenance. The new
    /// values go through the same invariant checks.
    pub fn with_voxels(&self, voxels: Vec<f64>) -> Result<Self> {
        let mut v = Volume::new(self.dims, self.spacing, voxels)?;
        v.provenance = self.provenance.clone();
        v.orientation = self.orientation;
        Ok(v)
    }
}

/// A binary lesion mask with the dims of its paired volume.
#[derive(Debug, Clone)]
pub struct LabelVolume {
    dims: (usize, usize, usize),
    labels: Vec<u8>,
    pub provenance: LabelProvenance,
    pub orientation: Orientation,
}

impl LabelVolume {
    pub fn new(dims: (usize, usize, usize), labels: Vec<u8>) -> Result<Self> {
        let (nx, ny, nz) = dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::validation(format!("degenerate dims {:?}", dims)));
        }
        if labels.len() != nx * ny * nz {
            return Err(Error::validation(format!(
                "label count {} does not match dims {:?}",
                labels.len(),
                dims
            )));
        }
        if let Some((i, &v)) = labels.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::data(format!(
                "non-binary label value {} at index {}",
                v, i
            )));
        }
        Ok(LabelVolume {
            dims,
            labels,
            provenance: LabelProvenance::default(),
            orientation: Orientation::Axial,
        })
    }

    pub fn with_provenance(mut self, p: LabelProvenance) -> Self {
        self.provenance = p;
        self
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[x + self.dims.0 * (y + self.dims.1 * z)]
    }

    pub fn plane(&self, z: usize) -> &[u8] {
        let n = self.dims.0 * self.dims.1;
        &self.labels[z * n..(z + 1) * n]
    }

    pub fn lesion_voxels(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }
}

/// Check that a volume and mask can be paired: equal dims and a strictly
/// binary mask (binarity is already a `LabelVolume` invariant, but re-checked
/// here so callers validating raw buffers get the precise error).
pub fn validate_pair(v: &Volume, m: &LabelVolume) -> Result<()> {
    if v.dims() != m.dims() {
        return Err(Error::validation(format!(
            "dim mismatch: volume {:?} vs mask {:?}",
            v.dims(),
            m.dims()
        )));
    }
    if let Some((i, &val)) = m.labels().iter().enumerate().find(|(_, &val)| val > 1) {
        return Err(Error::data(format!(
            "non-binary label value {} at index {}",
            val, i
        )));
    }
    Ok(())
}

/// Load an intensity volume from a NIfTI-1 file (`.nii` / `.nii.gz`) or the
/// harness's raw format (`.rawvol` sidecar).
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let decoded = if raw::is_raw_path(path) {
        raw::load(path)?
    } else {
        nifti::load(path)?
    };
    decoded.into_volume()
}

/// Load a lesion mask. Float payloads are binarized at > 0.5 (with a warning
/// on stderr when any value is neither 0 nor 1); integer payloads must
/// already be binary.
pub fn load_label_volume(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let decoded = if raw::is_raw_path(path) {
        raw::load(path)?
    } else {
        nifti::load(path)?
    };
    decoded.into_label_volume(path)
}

/// Write a volume as NIfTI-1 float32 (gzipped when the path ends in `.gz`),
/// or in the raw format when the path ends in `.rawvol`.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if raw::is_raw_path(path) {
        raw::save_f32(path, v.dims(), v.spacing(), v.voxels())
    } else {
        nifti::save_f32(path, v.dims(), v.spacing(), v.voxels())
    }
}

/// Write a mask as NIfTI-1 uint8 (gzipped when the path ends in `.gz`), or in
/// the raw format when the path ends in `.rawvol`.
pub fn save_label_volume(m: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if raw::is_raw_path(path) {
        raw::save_u8(path, m.dims(), (1.0, 1.0, 1.0), m.labels())
    } else {
        nifti::save_u8(path, m.dims(), (1.0, 1.0, 1.0), m.labels())
    }
}

/// A decoded file payload before conversion into a domain type.
pub(crate) struct Decoded {
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub values: Vec<f64>,
    pub orientation: Orientation,
    pub from_float: bool,
}

impl Decoded {
    fn into_volume(self) -> Result<Volume> {
        let mut v = Volume::new(self.dims, self.spacing, self.values)?;
        v.orientation = self.orientation;
        Ok(v)
    }

    fn into_label_volume(self, path: &Path) -> Result<LabelVolume> {
        let mut warned = false;
        let labels: Vec<u8> = if self.from_float {
            let mut out = Vec::with_capacity(self.values.len());
            for &v in &self.values {
                if v != 0.0 && v != 1.0 && !warned {
                    eprintln!(
                        "warning: {}: float mask value {} binarized at > 0.5",
                        path.display(),
                        v
                    );
                    warned = true;
                }
                out.push(u8::from(v > 0.5));
            }
            out
        } else {
            let mut out = Vec::with_capacity(self.values.len());
            for (i, &v) in self.values.iter().enumerate() {
                if v == 0.0 {
                    out.push(0);
                } else if v == 1.0 {
                    out.push(1);
                } else {
                    return Err(Error::data(format!(
                        "{}: non-binary label value {} at index {}",
                        path.display(),
                        v,
                        i
                    )));
                }
            }
            out
        };
        let mut m = LabelVolume::new(self.dims, labels)?;
        m.orientation = self.orientation;
        Ok(m)
    }
}
