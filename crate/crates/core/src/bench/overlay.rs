//! Prediction-vs-truth overlays: grayscale slice with true positives in
//! orange, false positives in red, false negatives in blue, written as
//! lossless PNG.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::slicer::Grid;

pub const TRUE_POS_RGB: [u8; 3] = [255, 165, 0];
pub const FALSE_POS_RGB: [u8; 3] = [255, 0, 0];
pub const FALSE_NEG_RGB: [u8; 3] = [0, 0, 255];

/// RGB pixels of the overlay, row-major.
pub fn overlay_pixels(image: &Grid<f64>, pred: &Grid<u8>, truth: &Grid<u8>) -> Result<Vec<u8>> {
    if (image.h(), image.w()) != (pred.h(), pred.w())
        || (image.h(), image.w()) != (truth.h(), truth.w())
    {
        return Err(Error::validation("overlay inputs must share one shape"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in image.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut out = Vec::with_capacity(image.data().len() * 3);
    for ((&v, &p), &t) in image.data().iter().zip(pred.data()).zip(truth.data()) {
        let rgb = match (p, t) {
            (1, 1) => TRUE_POS_RGB,
            (1, 0) => FALSE_POS_RGB,
            (0, 1) => FALSE_NEG_RGB,
            _ => {
                let g = ((v - lo) * scale).round().clamp(0.0, 255.0) as u8;
                [g, g, g]
            }
        };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

/// Render and write the overlay PNG.
pub fn render_overlay(
    image: &Grid<f64>,
    pred: &Grid<u8>,
    truth: &Grid<u8>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let pixels = overlay_pixels(image, pred, truth)?;
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.w() as u32, image.h() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::data(format!("png header: {}", e)))?;
    writer
        .write_image_data(&pixels)
        .map_err(|e| Error::data(format!("png payload: {}", e)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixtures() -> (Grid<f64>, Grid<u8>, Grid<u8>) {
        let image = Grid::new(2, 2, vec![0.0, 1.0, 2.0, 4.0]);
        let pred = Grid::new(2, 2, vec![1, 1, 0, 0]);
        let truth = Grid::new(2, 2, vec![1, 0, 1, 0]);
        (image, pred, truth)
    }

    #[test]
    fn pixel_color_coding() {
        let (image, pred, truth) = fixtures();
        let px = overlay_pixels(&image, &pred, &truth).unwrap();
        assert_eq!(&px[0..3], &TRUE_POS_RGB);
        assert_eq!(&px[3..6], &FALSE_POS_RGB);
        assert_eq!(&px[6..9], &FALSE_NEG_RGB);
        assert_eq!(&px[9..12], &[255, 255, 255], "max intensity background");
    }

    #[test]
    fn equal_masks_only_orange() {
        let image = Grid::filled(3, 3, 1.0);
        let m = Grid::new(3, 3, vec![0, 1, 0, 1, 1, 1, 0, 1, 0]);
        let px = overlay_pixels(&image, &m, &m).unwrap();
        for (i, &v) in m.data().iter().enumerate() {
            if v == 1 {
                assert_eq!(&px[3 * i..3 * i + 3], &TRUE_POS_RGB);
            } else {
                assert_ne!(&px[3 * i..3 * i + 3], &FALSE_POS_RGB);
                assert_ne!(&px[3 * i..3 * i + 3], &FALSE_NEG_RGB);
            }
        }
    }

    #[test]
    fn empty_prediction_only_blue() {
        let image = Grid::filled(2, 2, 1.0);
        let pred = Grid::filled(2, 2, 0u8);
        let truth = Grid::new(2, 2, vec![1, 1, 0, 0]);
        let px = overlay_pixels(&image, &pred, &truth).unwrap();
        assert_eq!(&px[0..3], &FALSE_NEG_RGB);
        assert_eq!(&px[3..6], &FALSE_NEG_RGB);
    }

    #[test]
    fn png_written_and_lossless() {
        let (image, pred, truth) = fixtures();
        let dir = std::env::temp_dir().join(format!("overlay-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ov.png");
        render_overlay(&image, &pred, &truth, &path).unwrap();
        let decoder = png::Decoder::new(std::fs::File::open(&path).unwrap());
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (2, 2));
        assert_eq!(
            &buf[..info.buffer_size()],
            &overlay_pixels(&image, &pred, &truth).unwrap()[..]
        );
    }
}
