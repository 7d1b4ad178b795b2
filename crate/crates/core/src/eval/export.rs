use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, ImageFormat, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Writes a mask as an 8-bit binary PGM with values 0 and 255.
pub fn write_mask_pgm(mask: &Mask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    save_pgm(&img, path)
}

/// Writes an 8-bit binary (P5) PGM.
pub(crate) fn save_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

/// Color overlay over a grayscale image with intensities in `[0, 1]`:
/// prediction red, prediction inside the ground truth yellow, ground-truth
/// contour green on top.
pub fn overlay_image(image: &[f32], pred: &Mask, truth: &Mask) -> Result<RgbImage> {
    let (h, w) = (pred.height(), pred.width());
    if !pred.same_dims(truth) || image.len() != h * w {
        return Err(Error::dim("overlay: image and masks differ in size"));
    }
    let mut out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let g = (image[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        let (p, t) = (pred.get(y as usize, x as usize), truth.get(y as usize, x as usize));
        let tint = match (p, t) {
            (true, true) => Some([255u8, 255, 0]),
            (true, false) => Some([255, 0, 0]),
            _ => None,
        };
        match tint {
            Some(c) => Rgb(c.map(|v| ((v as u16 + g as u16) / 2) as u8)),
            None => Rgb([g, g, g]),
        }
    });
    for (y, x) in truth.boundary() {
        out.put_pixel(x as u32, y as u32, Rgb([0, 255, 0]));
    }
    Ok(out)
}

pub fn write_overlay_png(image: &[f32], pred: &Mask, truth: &Mask, path: &Path) -> Result<()> {
    overlay_image(image, pred, truth)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}
