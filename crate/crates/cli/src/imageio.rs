//! Image emission (PPM always, PNG alongside) and mask loading.

use std::io::Write;
use std::path::Path;

use coscale_core::orchestrator::MaskGrid;
use coscale_core::quantizer::PixelImage;

use crate::error::{CliError, CliResult};

fn to_rgb8(img: &PixelImage) -> Vec<u8> {
    img.data
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Binary P6 PPM, 8 bits per sample.
pub fn write_ppm(path: &Path, img: &PixelImage) -> CliResult<()> {
    let mut out = std::fs::File::create(path)?;
    write!(out, "P6\n{} {}\n255\n", img.side, img.side)?;
    out.write_all(&to_rgb8(img))?;
    Ok(())
}

pub fn write_png(path: &Path, img: &PixelImage) -> CliResult<()> {
    let buf = image::RgbImage::from_raw(img.side as u32, img.side as u32, to_rgb8(img))
        .expect("pixel buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::Invariant(format!("png encode failed: {e}")))?;
    Ok(())
}

/// Loads a mask image; pixels brighter than half-scale count as inside
/// (regenerated), darker ones as teacher-forced.
pub fn load_mask(path: &Path) -> CliResult<MaskGrid> {
    if !path.exists() {
        return Err(CliError::Missing(path.display().to_string()));
    }
    let img = image::open(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        .to_luma8();
    if img.width() != img.height() {
        return Err(CliError::Usage(format!(
            "{}: mask must be square, got {}x{}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let side = img.width() as usize;
    let inside = img.pixels().map(|p| p.0[0] > 127).collect();
    Ok(MaskGrid::new(side, inside)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn ppm_and_png_roundtrip_through_image_crate() {
        let dir = tempdir().unwrap();
        let img = PixelImage {
            side: 2,
            data: vec![
                0.0, 0.5, 1.0, //
                1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.25, 0.25, 0.25,
            ],
        };
        let ppm = dir.path().join("x.ppm");
        let png = dir.path().join("x.png");
        write_ppm(&ppm, &img).unwrap();
        write_png(&png, &img).unwrap();
        let a = image::open(&ppm).unwrap().to_rgb8();
        let b = image::open(&png).unwrap().to_rgb8();
        assert_eq!(a.as_raw(), b.as_raw());
        assert_eq!(a.get_pixel(0, 0).0, [0, 128, 255]);
    }

    #[test]
    fn mask_loading_thresholds_luma() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mut img = image::GrayImage::new(2, 2);
        img.put_pixel(0, 0, image::Luma([255]));
        img.put_pixel(1, 1, image::Luma([200]));
        img.save(&path).unwrap();
        let mask = load_mask(&path).unwrap();
        assert_eq!(mask.inside, vec![true, false, false, true]);
    }
}
