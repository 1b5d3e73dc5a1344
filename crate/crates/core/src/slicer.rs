//! Axial slice extraction: turn normalized 3D volumes and masks into
//! 224x224 image/mask training samples, keeping only slices that contain
//! brain tissue.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{validate_pair, LabelVolume, Volume};

/// Side length every slice is resized to.
pub const SLICE_SIZE: usize = 224;

/// A dense row-major 2D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), h * w, "grid payload size mismatch");
        Grid { h, w, data }
    }

    pub fn filled(h: usize, w: usize, value: T) -> Self {
        Grid {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.w + x] = v;
    }
}

/// Identity of one axial slice.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct SliceProvenance {
    pub dataset_id: String,
    pub patient_id: String,
    pub scan_id: String,
    pub z_index: usize,
}

/// One training/evaluation sample: a 224x224 image with its binary mask.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub image: Grid<f64>,
    pub mask: Grid<u8>,
    pub provenance: SliceProvenance,
    pub lesion_pixels: usize,
}

impl SliceSample {
    pub fn new(image: Grid<f64>, mask: Grid<u8>, provenance: SliceProvenance) -> Self {
        debug_assert_eq!((image.h(), image.w()), (mask.h(), mask.w()));
        let lesion_pixels = mask.data().iter().filter(|&&v| v == 1).count();
        SliceSample {
            image,
            mask,
            provenance,
            lesion_pixels,
        }
    }
}

/// Source sample coordinate for destination pixel `i`, half-pixel-center
/// placement (align_corners = false).
fn src_coord(i: usize, src: usize, dst: usize) -> f64 {
    (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5
}

/// Separately clamped 4-tap bilinear resample. Constant images stay
/// constant and outputs never leave the input value range.
pub fn resize_bilinear(img: &Grid<f64>, out_h: usize, out_w: usize) -> Grid<f64> {
    let (h, w) = (img.h(), img.w());
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = src_coord(oy, h, out_h);
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0c = (y0 as isize).clamp(0, h as isize - 1) as usize;
        let y1c = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
        for ox in 0..out_w {
            let sx = src_coord(ox, w, out_w);
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0c = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let x1c = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
            let a = img.at(y0c, x0c);
            let b = img.at(y0c, x1c);
            let c = img.at(y1c, x0c);
            let d = img.at(y1c, x1c);
            let top = a + fx * (b - a);
            let bot = c + fx * (d - c);
            out.push(top + fy * (bot - top));
        }
    }
    Grid::new(out_h, out_w, out)
}

/// Nearest-neighbor resample with the same sample placement; keeps masks
/// binary.
pub fn resize_nearest(mask: &Grid<u8>, out_h: usize, out_w: usize) -> Grid<u8> {
    let (h, w) = (mask.h(), mask.w());
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = src_coord(oy, h, out_h);
        let yn = ((sy + 0.5).floor() as isize).clamp(0, h as isize - 1) as usize;
        for ox in 0..out_w {
            let sx = src_coord(ox, w, out_w);
            let xn = ((sx + 0.5).floor() as isize).clamp(0, w as isize - 1) as usize;
            out.push(mask.at(yn, xn));
        }
    }
    Grid::new(out_h, out_w, out)
}

fn plane_grid_f64(v: &Volume, z: usize) -> Grid<f64> {
    let (nx, ny, _) = v.dims();
    Grid::new(ny, nx, v.plane(z).to_vec())
}

fn plane_grid_u8(m: &LabelVolume, z: usize) -> Grid<u8> {
    let (nx, ny, _) = m.dims();
    Grid::new(ny, nx, m.plane(z).to_vec())
}

/// Cut every constant-z plane with at least `min_brain_voxels` nonzero
/// image voxels into a 224x224 sample. Output order follows z.
pub fn extract_slices(
    v: &Volume,
    m: &LabelVolume,
    min_brain_voxels: usize,
) -> Result<Vec<SliceSample>> {
    validate_pair(v, m)?;
    let (_, _, nz) = v.dims();
    let min_brain = min_brain_voxels.max(1);
    let mut out = Vec::new();
    for z in 0..nz {
        let brain = v.plane(z).iter().filter(|&&x| x != 0.0).count();
        if brain < min_brain {
            continue;
        }
        let image = resize_bilinear(&plane_grid_f64(v, z), SLICE_SIZE, SLICE_SIZE);
        let mask = resize_nearest(&plane_grid_u8(m, z), SLICE_SIZE, SLICE_SIZE);
        out.push(SliceSample::new(
            image,
            mask,
            SliceProvenance {
                dataset_id: v.provenance.dataset_id.clone(),
                patient_id: v.provenance.patient_id.clone(),
                scan_id: v.provenance.scan_id.clone(),
                z_index: z,
            },
        ));
    }
    Ok(out)
}

const CACHE_MAGIC: &[u8; 8] = b"SLCACHE1";

/// Write one scan's slices to the binary cache format: magic, slice count,
/// then per slice the z index, the float32 image payload and the mask as a
/// bitmask.
pub fn write_slice_cache(path: impl AsRef<Path>, samples: &[SliceSample]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        buf.extend_from_slice(&(s.provenance.z_index as u32).to_le_bytes());
        for &v in s.image.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut byte = 0u8;
        for (i, &m) in s.mask.data().iter().enumerate() {
            byte |= m << (i % 8);
            if i % 8 == 7 {
                buf.push(byte);
                byte = 0;
            }
        }
        if s.mask.data().len() % 8 != 0 {
            buf.push(byte);
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a slice cache back; the caller supplies the scan identity, which is
/// not stored in the file.
pub fn read_slice_cache(
    path: impl AsRef<Path>,
    dataset_id: &str,
    patient_id: &str,
    scan_id: &str,
) -> Result<Vec<SliceSample>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let fail = |msg: &str| Error::data(format!("{}: {}", path.display(), msg));
    if bytes.len() < 12 || &bytes[..8] != CACHE_MAGIC {
        return Err(fail("not a slice cache"));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let px = SLICE_SIZE * SLICE_SIZE;
    let mask_bytes = px.div_ceil(8);
    let rec = 4 + px * 4 + mask_bytes;
    if bytes.len() != 12 + count * rec {
        return Err(fail("truncated slice cache"));
    }
    let mut out = Vec::with_capacity(count);
    for s in 0..count {
        let base = 12 + s * rec;
        let z = u32::from_le_bytes(bytes[base..base + 4].try_into().unwrap()) as usize;
        let mut image = Vec::with_capacity(px);
        for i in 0..px {
            let off = base + 4 + i * 4;
            image.push(f64::from(f32::from_le_bytes(
                bytes[off..off + 4].try_into().unwrap(),
            )));
        }
        let mbase = base + 4 + px * 4;
        let mut mask = Vec::with_capacity(px);
        for i in 0..px {
            mask.push((bytes[mbase + i / 8] >> (i % 8)) & 1);
        }
        out.push(SliceSample::new(
            Grid::new(SLICE_SIZE, SLICE_SIZE, image),
            Grid::new(SLICE_SIZE, SLICE_SIZE, mask),
            SliceProvenance {
                dataset_id: dataset_id.to_string(),
                patient_id: patient_id.to_string(),
                scan_id: scan_id.to_string(),
                z_index: z,
            },
        ));
    }
    Ok(out)
}
