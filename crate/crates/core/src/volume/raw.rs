//! Portable raw volume format for tests and fixtures: a `.rawvol` JSON
//! sidecar `{dims, spacing, dtype, data}` next to a flat little-endian
//! binary payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Decoded, Orientation};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    /// Payload path relative to the sidecar.
    data: String,
}

pub(crate) fn is_raw_path(path: &Path) -> bool {
    path.extension()
        .map(|e| e.eq_ignore_ascii_case("rawvol"))
        .unwrap_or(false)
}

pub(crate) fn load(path: &Path) -> Result<Decoded> {
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(path)?)?;
    let payload_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&sidecar.data);
    let payload = fs::read(&payload_path)?;
    let [nx, ny, nz] = sidecar.dims;
    let n = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .ok_or_else(|| Error::data("voxel count overflow"))?;

    let (values, from_float) = match sidecar.dtype.as_str() {
        "f32" => {
            expect_len(&payload, n * 4, path)?;
            let v = payload
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            (v, true)
        }
        "i16" => {
            expect_len(&payload, n * 2, path)?;
            let v = payload
                .chunks_exact(2)
                .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])))
                .collect();
            (v, false)
        }
        "u8" => {
            expect_len(&payload, n, path)?;
            let v = payload.iter().map(|&b| f64::from(b)).collect();
            (v, false)
        }
        other => {
            return Err(Error::data(format!(
                "{}: unsupported raw dtype {:?}",
                path.display(),
                other
            )))
        }
    };

    Ok(Decoded {
        dims: (nx, ny, nz),
        spacing: (sidecar.spacing[0], sidecar.spacing[1], sidecar.spacing[2]),
        values,
        orientation: Orientation::Unknown,
        from_float,
    })
}

fn expect_len(payload: &[u8], want: usize, path: &Path) -> Result<()> {
    if payload.len() != want {
        return Err(Error::data(format!(
            "{}: payload is {} bytes, expected {}",
            path.display(),
            payload.len(),
            want
        )));
    }
    Ok(())
}

fn payload_name(path: &Path) -> String {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("volume");
    format!("{stem}.bin")
}

fn save(
    path: &Path,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    dtype: &str,
    payload: &[u8],
) -> Result<()> {
    let sidecar = Sidecar {
        dims: [dims.0, dims.1, dims.2],
        spacing: [spacing.0, spacing.1, spacing.2],
        dtype: dtype.to_string(),
        data: payload_name(path),
    };
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::write(dir.join(payload_name(path)), payload)?;
    fs::write(path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub(crate) fn save_f32(
    path: &Path,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    values: &[f64],
) -> Result<()> {
    let mut payload = Vec::with_capacity(values.len() * 4);
    for &v in values {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    save(path, dims, spacing, "f32", &payload)
}

pub(crate) fn save_u8(
    path: &Path,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    values: &[u8],
) -> Result<()> {
    save(path, dims, spacing, "u8", values)
}

#[cfg(test)]
mod tests {
    use crate::volume::{load_label_volume, load_volume, save_label_volume, save_volume};
    use crate::volume::{LabelVolume, Volume};

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "rawvol-test-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn volume_round_trip() {
        let dir = tmpdir();
        let p = dir.join("v.rawvol");
        let vals: Vec<f64> = (0..12).map(|i| f64::from(i as f32) * 0.5).collect();
        let v = Volume::new((3, 2, 2), (1.0, 2.0, 3.0), vals).unwrap();
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing(), v.spacing());
        assert_eq!(back.voxels(), v.voxels());
    }

    #[test]
    fn checkerboard_mask_round_trip() {
        let dir = tmpdir();
        let p = dir.join("m.rawvol");
        let labels: Vec<u8> = (0..8).map(|i| (i % 2) as u8).collect();
        let m = LabelVolume::new((2, 2, 2), labels.clone()).unwrap();
        save_label_volume(&m, &p).unwrap();
        let back = load_label_volume(&p).unwrap();
        for (i, (&a, &b)) in labels.iter().zip(back.labels().iter()).enumerate() {
            assert_eq!(a, b, "voxel {}", i);
        }
    }

    #[test]
    fn all_zero_mask_round_trip() {
        let dir = tmpdir();
        let p = dir.join("z.rawvol");
        let m = LabelVolume::new((2, 2, 1), vec![0; 4]).unwrap();
        save_label_volume(&m, &p).unwrap();
        let back = load_label_volume(&p).unwrap();
        assert!(back.labels().iter().all(|&v| v == 0));
    }
}
