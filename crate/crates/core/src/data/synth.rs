use std::path::Path;

use image::{GrayImage, Luma};

use super::{Sample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::eval::{save_pgm, write_mask_pgm};
use crate::mask::Mask;
use crate::tensor::{Rng, Tensor};

/// Rotated ellipse or rectangle in unit image coordinates.
struct Shape {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    rect: bool,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        if self.rect {
            u.abs() <= 1.0 && v.abs() <= 1.0
        } else {
            u * u + v * v <= 1.0
        }
    }

    fn rasterize(&self, res: usize) -> Mask {
        let mut m = Mask::from_fn(res, res, |y, x| {
            self.contains((x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64)
        });
        if m.is_empty() {
            // too thin for this grid: keep at least the center pixel
            let px = |v: f64| ((v * res as f64) as usize).min(res - 1);
            m.set(px(self.cy), px(self.cx), true);
        }
        m
    }
}

fn union(shapes: &[Shape], res: usize) -> Mask {
    shapes
        .iter()
        .map(|s| s.rasterize(res))
        .reduce(|a, b| a.union(&b))
        .expect("non-empty shape list")
}

fn jitter(rng: &mut Rng, center: f64, spread: f64) -> f64 {
    rng.uniform_range(center - spread, center + spread)
}

fn generate_one(rng: &mut Rng, res: usize) -> (Tensor<f32>, Vec<Mask>) {
    let mut lungs = Vec::new();
    let mut bars = Vec::new();
    for side in [-1.0, 1.0] {
        let lung = Shape {
            cx: jitter(rng, 0.5 + side * 0.19, 0.02),
            cy: jitter(rng, 0.5, 0.03),
            a: jitter(rng, 0.13, 0.01),
            b: jitter(rng, 0.26, 0.02),
            angle: jitter(rng, 0.0, 0.1),
            rect: false,
        };
        // bar across the lung apex, sloping down toward the midline
        bars.push(Shape {
            cx: lung.cx + jitter(rng, 0.0, 0.02),
            cy: lung.cy - 0.8 * lung.b,
            a: jitter(rng, 0.12, 0.015),
            b: jitter(rng, 0.02, 0.003),
            angle: -side * jitter(rng, 0.25, 0.1),
            rect: true,
        });
        lungs.push(lung);
    }
    let heart = Shape {
        cx: jitter(rng, 0.56, 0.02),
        cy: jitter(rng, 0.64, 0.02),
        a: jitter(rng, 0.14, 0.01),
        b: jitter(rng, 0.12, 0.01),
        angle: jitter(rng, 0.3, 0.1),
        rect: false,
    };
    let body = Shape {
        cx: 0.5,
        cy: 0.55,
        a: 0.46,
        b: 0.5,
        angle: 0.0,
        rect: false,
    };
    let masks = vec![union(&lungs, res), union(&bars, res), heart.rasterize(res)];
    let body = body.rasterize(res);

    let composite: Vec<f64> = (0..res * res)
        .map(|i| {
            let (y, x) = (i / res, i % res);
            if masks[1].get(y, x) {
                0.85
            } else if masks[2].get(y, x) {
                0.65
            } else if masks[0].get(y, x) {
                0.2
            } else if body.get(y, x) {
                0.55
            } else {
                0.1
            }
        })
        .collect();
    let smooth = blur3(&composite, res);
    let data = smooth
        .iter()
        .map(|&v| (v + 0.03 * rng.normal()).clamp(0.0, 1.0) as f32)
        .collect();
    (Tensor::new(vec![1, res, res], data).expect("res*res values"), masks)
}

/// Separable `[1, 2, 1] / 4` blur with clamped borders.
fn blur3(src: &[f64], res: usize) -> Vec<f64> {
    let at = |v: &[f64], y: isize, x: isize| {
        let c = |i: isize| i.clamp(0, res as isize - 1) as usize;
        v[c(y) * res + c(x)]
    };
    let mut tmp = vec![0.0; res * res];
    for y in 0..res as isize {
        for x in 0..res as isize {
            tmp[y as usize * res + x as usize] = 0.25 * at(src, y, x - 1) + 0.5 * at(src, y, x) + 0.25 * at(src, y, x + 1);
        }
    }
    let mut out = vec![0.0; res * res];
    for y in 0..res as isize {
        for x in 0..res as isize {
            out[y as usize * res + x as usize] = 0.25 * at(&tmp, y - 1, x) + 0.5 * at(&tmp, y, x) + 0.25 * at(&tmp, y + 1, x);
        }
    }
    out
}

/// `n` synthetic radiograph-like samples with ids `synth_0000`, ... Sample
/// `i` depends only on `(seed, i, resolution)`.
pub fn synth_generate(n: usize, resolution: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::config("synthetic sample count must be at least 1"));
    }
    if resolution < 8 {
        return Err(Error::config(format!("synthetic resolution {resolution} is below 8")));
    }
    let root = Rng::new(seed);
    (0..n)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            let (image, masks) = generate_one(&mut rng, resolution);
            Sample::new(format!("synth_{i:04}"), image, masks)
        })
        .collect()
}

/// Writes `images/<id>.pgm` and `masks/<id>_<class>.pgm` (8-bit) under `dir`.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in samples {
        let (h, w) = (s.height(), s.width());
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            let v = s.image.data()[y as usize * w + x as usize];
            Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        let path = dir.join("images").join(format!("{}.pgm", s.id));
        save_pgm(&img, &path)?;
        for (m, class) in s.masks.iter().zip(CLASS_NAMES) {
            write_mask_pgm(m, &dir.join("masks").join(format!("{}_{class}.pgm", s.id)))?;
        }
    }
    Ok(())
}
