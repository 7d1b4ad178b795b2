use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use super::{Sample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 2] = ["pgm", "png"];

/// Samples that loaded, plus one message per id that did not.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub samples: Vec<Sample>,
    pub errors: Vec<(String, String)>,
}

/// Reads an 8- or 16-bit grayscale image as `(height, width, values in [0, 1])`.
pub fn read_grayscale(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path).map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
    let luma = img.to_luma32f();
    let (w, h) = luma.dimensions();
    Ok((h as usize, w as usize, luma.into_raw()))
}

/// Area-weighted resampling of a `sh x sw` plane to `dh x dw`: every output
/// pixel is the overlap-weighted mean of the source pixels it covers.
pub fn resample_area(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    if (sh, sw) == (dh, dw) {
        return src.to_vec();
    }
    let rows = area_weights(sh, dh);
    let cols = area_weights(sw, dw);
    // columns first, then rows
    let mut tmp = vec![0.0f64; sh * dw];
    for y in 0..sh {
        for (x, taps) in cols.iter().enumerate() {
            tmp[y * dw + x] = taps.iter().map(|&(i, wt)| wt * src[y * sw + i] as f64).sum();
        }
    }
    let mut out = vec![0.0f32; dh * dw];
    for (y, taps) in rows.iter().enumerate() {
        for x in 0..dw {
            out[y * dw + x] = taps.iter().map(|&(i, wt)| wt * tmp[i * dw + x]).sum::<f64>() as f32;
        }
    }
    out
}

/// Per output index, `(source index, weight)` with weights summing to 1.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = hi.min((i + 1) as f64) - lo.max(i as f64);
                if overlap > 0.0 {
                    taps.push((i, overlap / scale));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    EXTENSIONS.iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

fn load_one(root: &Path, id: &str, image_path: &Path, resolution: usize) -> Result<Sample> {
    let (h, w, pixels) = read_grayscale(image_path)?;
    if h != w {
        return Err(Error::Data(format!("image is {h}x{w}, not square")));
    }
    let image = resample_area(&pixels, h, w, resolution, resolution);
    let mut masks = Vec::with_capacity(CLASS_NAMES.len());
    for class in CLASS_NAMES {
        let path = find_file(&root.join("masks"), &format!("{id}_{class}"))
            .ok_or_else(|| Error::Data(format!("missing mask masks/{id}_{class}.pgm|png")))?;
        let (mh, mw, m) = read_grayscale(&path)?;
        if (mh, mw) != (h, w) {
            return Err(Error::Data(format!("mask {} is {mh}x{mw}, image is {h}x{w}", path.display())));
        }
        let binary: Vec<f32> = m.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        let scaled = resample_area(&binary, h, w, resolution, resolution);
        masks.push(Mask::from_bits(resolution, resolution, scaled.iter().map(|&v| v >= 0.5).collect())?);
    }
    Sample::new(id, Tensor::new(vec![1, resolution, resolution], image)?, masks)
}

/// Loads `root/images/<id>.{pgm,png}` with `root/masks/<id>_<class>.{pgm,png}`
/// for every class, resampled to `resolution`. Ids come back in lexicographic
/// order; broken samples are reported rather than fatal.
pub fn load_dataset(root: &Path, resolution: usize) -> Result<LoadReport> {
    if resolution == 0 {
        return Err(Error::config("resolution must be positive"));
    }
    let images = root.join("images");
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut ids = BTreeSet::new();
    if images.is_dir() {
        let entries = std::fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&images, e))?.path();
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if let (Some(stem), Some(ext)) = (path.file_stem().and_then(|s| s.to_str()), ext) {
                if EXTENSIONS.contains(&ext.as_str()) {
                    ids.insert(stem.to_string());
                }
            }
        }
    }
    let mut report = LoadReport::default();
    for id in ids {
        let path = find_file(&images, &id).expect("listed above");
        match load_one(root, &id, &path, resolution) {
            Ok(s) => report.samples.push(s),
            Err(e) => report.errors.push((id, e.to_string())),
        }
    }
    Ok(report)
}
