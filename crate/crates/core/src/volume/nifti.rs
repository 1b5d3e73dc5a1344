//! Minimal NIfTI-1 single-file reader/writer.
//!
//! Reads uint8 / int16 / float32 payloads, applies scl_slope/scl_inter,
//! honors vox_offset, detects byte order from `dim[0]`, and permutes voxel
//! axes so the third axis is the scanner z direction when the header's
//! sform/qform says otherwise. Writes float32 or uint8 with an identity
//! sform. Gzip-compressed files are handled transparently.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Decoded, Orientation};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

pub(crate) fn load(path: &Path) -> Result<Decoded> {
    let bytes = read_maybe_gzipped(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {}", path.display(), msg)),
        other => other,
    })
}

fn read_maybe_gzipped(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic)?;
    let mut raw = Vec::new();
    raw.extend_from_slice(&magic[..n]);
    file.read_to_end(&mut raw)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::data(format!("{}: gzip decode failed: {}", path.display(), e)))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Header {
    dim: [i16; 8],
    datatype: i16,
    pixdim: [f32; 8],
    vox_offset: f32,
    scl_slope: f32,
    scl_inter: f32,
    qform_code: i16,
    sform_code: i16,
    quatern: [f32; 3],
    srow: [[f32; 4]; 3],
    swapped: bool,
}

fn read_i16(b: &[u8], off: usize, swap: bool) -> i16 {
    let raw = [b[off], b[off + 1]];
    if swap {
        i16::from_be_bytes(raw)
    } else {
        i16::from_le_bytes(raw)
    }
}

fn read_f32(b: &[u8], off: usize, swap: bool) -> f32 {
    let raw = [b[off], b[off + 1], b[off + 2], b[off + 3]];
    if swap {
        f32::from_be_bytes(raw)
    } else {
        f32::from_le_bytes(raw)
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::data(format!(
            "file too small for a NIfTI-1 header ({} bytes)",
            bytes.len()
        )));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(Error::data(format!(
            "unsupported magic {:?} (single-file NIfTI-1 expected)",
            magic
        )));
    }
    // dim[0] holds the dimension count, 1..=7; any other value means the
    // file was written on an opposite-endian machine.
    let dim0_le = read_i16(bytes, 40, false);
    let swapped = !(1..=7).contains(&dim0_le);
    let dim0 = read_i16(bytes, 40, swapped);
    if !(1..=7).contains(&dim0) {
        return Err(Error::data(format!("unreadable header: dim[0] = {}", dim0)));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = read_i16(bytes, 40 + 2 * i, swapped);
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = read_f32(bytes, 76 + 4 * i, swapped);
    }
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = read_f32(bytes, 280 + 16 * r + 4 * c, swapped);
        }
    }
    Ok(Header {
        dim,
        datatype: read_i16(bytes, 70, swapped),
        pixdim,
        vox_offset: read_f32(bytes, 108, swapped),
        scl_slope: read_f32(bytes, 112, swapped),
        scl_inter: read_f32(bytes, 116, swapped),
        qform_code: read_i16(bytes, 252, swapped),
        sform_code: read_i16(bytes, 254, swapped),
        quatern: [
            read_f32(bytes, 256, swapped),
            read_f32(bytes, 260, swapped),
            read_f32(bytes, 264, swapped),
        ],
        srow,
        swapped,
    })
}

/// 3x3 direction matrix: column c is the scanner-space direction of voxel
/// axis c. None when neither sform nor qform is set.
fn direction_matrix(h: &Header) -> Option<[[f64; 3]; 3]> {
    if h.sform_code > 0 {
        let mut m = [[0f64; 3]; 3];
        for (row, srow) in m.iter_mut().zip(h.srow.iter()) {
            for (v, s) in row.iter_mut().zip(srow.iter()) {
                *v = f64::from(*s);
            }
        }
        return Some(m);
    }
    if h.qform_code > 0 {
        let (b, c, d) = (
            f64::from(h.quatern[0]),
            f64::from(h.quatern[1]),
            f64::from(h.quatern[2]),
        );
        let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let r = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - b * b - c * c,
            ],
        ];
        let mut m = [[0f64; 3]; 3];
        for (row, rrow) in m.iter_mut().zip(r.iter()) {
            for col in 0..3 {
                let scale = f64::from(h.pixdim[col + 1].abs()) * if col == 2 { qfac } else { 1.0 };
                row[col] = rrow[col] * scale;
            }
        }
        return Some(m);
    }
    None
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let h = parse_header(bytes)?;

    // Drop trailing singleton dimensions (common exporter quirk for 4D).
    let ndim = h.dim[0] as usize;
    let mut dims: Vec<usize> = (1..=ndim).map(|i| h.dim[i].max(0) as usize).collect();
    while dims.len() > 3 && dims.last() == Some(&1) {
        dims.pop();
    }
    if dims.len() != 3 {
        return Err(Error::data(format!(
            "dimension count {} after dropping trailing singletons (3 required)",
            dims.len()
        )));
    }
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let n = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .ok_or_else(|| Error::data("voxel count overflow"))?;
    if n == 0 {
        return Err(Error::data(format!("degenerate dims {:?}", dims)));
    }

    let elem_size = match h.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::data(format!(
                "unsupported datatype code {} (uint8/int16/float32 supported)",
                other
            )))
        }
    };
    let offset = h.vox_offset as usize;
    if offset < HEADER_SIZE || bytes.len() < offset + n * elem_size {
        return Err(Error::data(format!(
            "payload truncated: need {} bytes at offset {}, file has {}",
            n * elem_size,
            offset,
            bytes.len()
        )));
    }
    let payload = &bytes[offset..offset + n * elem_size];

    // scl_slope == 0 means "no scaling" by convention.
    let slope = if h.scl_slope == 0.0 {
        1.0
    } else {
        f64::from(h.scl_slope)
    };
    let inter = f64::from(h.scl_inter);

    let mut values = Vec::with_capacity(n);
    match h.datatype {
        DT_UINT8 => {
            for &b in payload {
                values.push(f64::from(b) * slope + inter);
            }
        }
        DT_INT16 => {
            for ch in payload.chunks_exact(2) {
                let raw = if h.swapped {
                    i16::from_be_bytes([ch[0], ch[1]])
                } else {
                    i16::from_le_bytes([ch[0], ch[1]])
                };
                values.push(f64::from(raw) * slope + inter);
            }
        }
        DT_FLOAT32 => {
            for ch in payload.chunks_exact(4) {
                let raw = if h.swapped {
                    f32::from_be_bytes([ch[0], ch[1], ch[2], ch[3]])
                } else {
                    f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]])
                };
                values.push(f64::from(raw) * slope + inter);
            }
        }
        _ => unreachable!(),
    }
    if let Some((i, &v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::data(format!(
            "non-finite voxel {} encountered at index {}",
            v, i
        )));
    }

    // Voxel size 0 in a header means "unset"; fall back to 1 mm.
    let sp = |p: f32| -> f64 {
        let a = f64::from(p.abs());
        if a > 0.0 {
            a
        } else {
            1.0
        }
    };
    let spacing = (sp(h.pixdim[1]), sp(h.pixdim[2]), sp(h.pixdim[3]));

    let (dims, spacing, values, orientation) = match direction_matrix(&h) {
        None => ((nx, ny, nz), spacing, values, Orientation::Unknown),
        Some(m) => {
            // Voxel axis most aligned with scanner z (inferior-superior).
            let mut sup_axis = 0;
            for c in 1..3 {
                if m[2][c].abs() > m[2][sup_axis].abs() {
                    sup_axis = c;
                }
            }
            if sup_axis == 2 {
                ((nx, ny, nz), spacing, values, Orientation::Axial)
            } else {
                // Swap the superior axis into third position. The swap is an
                // involution, so it doubles as its own inverse.
                let mut perm = [0usize, 1, 2];
                perm.swap(sup_axis, 2);
                let src_dims = [nx, ny, nz];
                let src_sp = [spacing.0, spacing.1, spacing.2];
                let d = [src_dims[perm[0]], src_dims[perm[1]], src_dims[perm[2]]];
                let sp = (src_sp[perm[0]], src_sp[perm[1]], src_sp[perm[2]]);
                let mut out = vec![0.0; n];
                for sz in 0..d[2] {
                    for sy in 0..d[1] {
                        for sx in 0..d[0] {
                            let s = [sx, sy, sz];
                            let f = [s[perm[0]], s[perm[1]], s[perm[2]]];
                            out[sx + d[0] * (sy + d[1] * sz)] =
                                values[f[0] + src_dims[0] * (f[1] + src_dims[1] * f[2])];
                        }
                    }
                }
                (
                    (d[0], d[1], d[2]),
                    sp,
                    out,
                    Orientation::AxialPermuted(perm),
                )
            }
        }
    };

    Ok(Decoded {
        dims,
        spacing,
        values,
        orientation,
        from_float: h.datatype == DT_FLOAT32,
    })
}

fn build_header(
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    datatype: i16,
    bitpix: i16,
) -> Vec<u8> {
    let mut h = vec![0u8; 352]; // header + 4-byte extension flag, vox_offset 352
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dim: [i16; 8] = [3, dims.0 as i16, dims.1 as i16, dims.2 as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim: [f32; 8] = [
        1.0,
        spacing.0 as f32,
        spacing.1 as f32,
        spacing.2 as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352f32.to_le_bytes()); // vox_offset
    h[112..116].copy_from_slice(&1f32.to_le_bytes()); // scl_slope
    h[116..120].copy_from_slice(&0f32.to_le_bytes()); // scl_inter
    h[254..256].copy_from_slice(&1i16.to_le_bytes()); // sform_code = scanner
    let srow: [[f32; 4]; 3] = [
        [spacing.0 as f32, 0.0, 0.0, 0.0],
        [0.0, spacing.1 as f32, 0.0, 0.0],
        [0.0, 0.0, spacing.2 as f32, 0.0],
    ];
    for (r, row) in srow.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            h[280 + 16 * r + 4 * c..284 + 16 * r + 4 * c].copy_from_slice(&v.to_le_bytes());
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn write_maybe_gzipped(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    let file = File::create(path)?;
    if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        let mut file = file;
        file.write_all(bytes)?;
    }
    Ok(())
}

pub(crate) fn save_f32(
    path: &Path,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    values: &[f64],
) -> Result<()> {
    let mut bytes = build_header(dims, spacing, DT_FLOAT32, 32);
    bytes.reserve(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_maybe_gzipped(path, &bytes)
}

pub(crate) fn save_u8(
    path: &Path,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    values: &[u8],
) -> Result<()> {
    let mut bytes = build_header(dims, spacing, DT_UINT8, 8);
    bytes.extend_from_slice(values);
    write_maybe_gzipped(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{load_volume, save_volume, Volume};

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "nifti-test-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn identity_one_voxel() {
        let dir = tmpdir();
        let p = dir.join("one.nii");
        let v = Volume::new((1, 1, 1), (1.0, 1.0, 1.0), vec![7.0]).unwrap();
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.dims(), (1, 1, 1));
        assert_eq!(back.voxels(), &[7.0]);
    }

    #[test]
    fn round_trip_bit_identical() {
        let dir = tmpdir();
        let p1 = dir.join("rt1.nii");
        let p2 = dir.join("rt2.nii");
        let vals: Vec<f64> = (0..24).map(|i| f64::from(i as f32) * 0.37 + 1.0).collect();
        let vals: Vec<f64> = vals.iter().map(|&v| f64::from(v as f32)).collect();
        let v = Volume::new((2, 3, 4), (0.5, 0.75, 2.0), vals).unwrap();
        save_volume(&v, &p1).unwrap();
        let mid = load_volume(&p1).unwrap();
        assert_eq!(mid.dims(), v.dims());
        assert_eq!(mid.spacing(), (0.5, 0.75, 2.0));
        save_volume(&mid, &p2).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(
            a[352..],
            b[352..],
            "voxel payload must round-trip byte-identically"
        );
        let back = load_volume(&p2).unwrap();
        assert_eq!(back.voxels(), mid.voxels());
    }

    #[test]
    fn int16_scaling_applied() {
        // Hand-built 4x4x2 int16 file with slope 2.0, intercept 1.0.
        let dir = tmpdir();
        let p = dir.join("scaled.nii");
        let mut bytes = build_header((4, 4, 2), (1.0, 1.0, 1.0), DT_INT16, 16);
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        for _ in 0..32 {
            bytes.extend_from_slice(&3i16.to_le_bytes());
        }
        std::fs::write(&p, &bytes).unwrap();
        let v = load_volume(&p).unwrap();
        assert!(v.voxels().iter().all(|&x| x == 7.0), "3*2+1 = 7");
    }

    #[test]
    fn mask_round_trip_byte_identical() {
        use crate::volume::{load_label_volume, save_label_volume, LabelVolume};
        let dir = tmpdir();
        let p1 = dir.join("m1.nii");
        let p2 = dir.join("m2.nii");
        let labels: Vec<u8> = (0..27).map(|i| (i % 2) as u8).collect();
        let m = LabelVolume::new((3, 3, 3), labels.clone()).unwrap();
        save_label_volume(&m, &p1).unwrap();
        let mid = load_label_volume(&p1).unwrap();
        assert_eq!(mid.labels(), &labels[..]);
        save_label_volume(&mid, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn gzip_round_trip() {
        let dir = tmpdir();
        let p = dir.join("vol.nii.gz");
        let v = Volume::new((3, 3, 3), (1.0, 1.0, 1.0), (0..27).map(f64::from).collect()).unwrap();
        save_volume(&v, &p).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[..2], &[0x1f, 0x8b], "file must actually be gzipped");
        let back = load_volume(&p).unwrap();
        assert_eq!(back.voxels(), v.voxels());
    }

    #[test]
    fn trailing_singleton_fourth_dim_accepted() {
        let dir = tmpdir();
        let p = dir.join("4d.nii");
        let mut bytes = build_header((2, 2, 2), (1.0, 1.0, 1.0), DT_FLOAT32, 32);
        // Rewrite dim[] as a 4D shape with trailing 1.
        let dim: [i16; 8] = [4, 2, 2, 2, 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            bytes[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        for i in 0..8 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        std::fs::write(&p, &bytes).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.dims(), (2, 2, 2));
    }

    #[test]
    fn unsupported_datatype_rejected() {
        let dir = tmpdir();
        let p = dir.join("f64.nii");
        let mut bytes = build_header((1, 1, 1), (1.0, 1.0, 1.0), 64, 64);
        bytes.extend_from_slice(&1f64.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        let err = load_volume(&p).unwrap_err();
        assert!(err.to_string().contains("unsupported datatype"));
    }

    #[test]
    fn byte_swapped_file_read() {
        let dir = tmpdir();
        let p = dir.join("be.nii");
        let mut bytes = build_header((2, 1, 1), (1.0, 1.0, 1.0), DT_FLOAT32, 32);
        // Re-encode every parsed field big-endian.
        let dim: [i16; 8] = [3, 2, 1, 1, 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            bytes[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_be_bytes());
        }
        bytes[70..72].copy_from_slice(&DT_FLOAT32.to_be_bytes());
        bytes[72..74].copy_from_slice(&32i16.to_be_bytes());
        let pixdim: [f32; 8] = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        for (i, q) in pixdim.iter().enumerate() {
            bytes[76 + 4 * i..80 + 4 * i].copy_from_slice(&q.to_be_bytes());
        }
        bytes[108..112].copy_from_slice(&352f32.to_be_bytes());
        bytes[112..116].copy_from_slice(&1f32.to_be_bytes());
        bytes[116..120].copy_from_slice(&0f32.to_be_bytes());
        bytes[254..256].copy_from_slice(&1i16.to_be_bytes());
        let srow: [[f32; 4]; 3] = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        for (r, row) in srow.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                bytes[280 + 16 * r + 4 * c..284 + 16 * r + 4 * c].copy_from_slice(&v.to_be_bytes());
            }
        }
        bytes.extend_from_slice(&5f32.to_be_bytes());
        bytes.extend_from_slice(&9f32.to_be_bytes());
        std::fs::write(&p, &bytes).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.voxels(), &[5.0, 9.0]);
    }

    #[test]
    fn sagittal_file_permuted_to_axial() {
        // sform says voxel axis 0 is the scanner z axis: expect a (2<->0)
        // axis swap and the permuted flag.
        let dir = tmpdir();
        let p = dir.join("sag.nii");
        let mut bytes = build_header((2, 3, 4), (0.5, 1.0, 2.0), DT_FLOAT32, 32);
        let srow: [[f32; 4]; 3] = [
            [0.0, 0.0, 2.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.5, 0.0, 0.0, 0.0],
        ];
        for (r, row) in srow.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                bytes[280 + 16 * r + 4 * c..284 + 16 * r + 4 * c].copy_from_slice(&v.to_le_bytes());
            }
        }
        for i in 0..24 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        std::fs::write(&p, &bytes).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.dims(), (4, 3, 2));
        assert_eq!(v.spacing(), (2.0, 1.0, 0.5));
        assert_eq!(v.orientation, Orientation::AxialPermuted([2, 1, 0]));
        // stored (x', y', z') = file (z', y', x')
        assert_eq!(v.voxel(3, 2, 1), f64::from((1 + 2 * (2 + 3 * 3)) as f32));
    }

    #[test]
    fn missing_orientation_flagged_unknown() {
        let dir = tmpdir();
        let p = dir.join("noq.nii");
        let mut bytes = build_header((2, 2, 2), (1.0, 1.0, 1.0), DT_FLOAT32, 32);
        bytes[252..254].copy_from_slice(&0i16.to_le_bytes());
        bytes[254..256].copy_from_slice(&0i16.to_le_bytes());
        for i in 0..8 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        std::fs::write(&p, &bytes).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.orientation, Orientation::Unknown);
        assert_eq!(v.voxel(1, 0, 0), 1.0, "voxels must be untouched");
    }
}
