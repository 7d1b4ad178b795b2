//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use cxrseg::mask::Mask;
use cxrseg::tensor::Rng;

/// Random mask made of a few discs and rectangles, optionally salted with
/// isolated pixels; may be empty.
pub fn random_mask(rng: &mut Rng, h: usize, w: usize) -> Mask {
    let shapes = (rng.uniform() * 4.0) as usize;
    let mut spec = Vec::new();
    for _ in 0..shapes {
        let cy = rng.uniform() * h as f64;
        let cx = rng.uniform() * w as f64;
        let r = 1.0 + rng.uniform() * (h.min(w) as f64 / 3.0);
        spec.push((cy, cx, r, rng.uniform() < 0.5));
    }
    let salt = if rng.uniform() < 0.3 { 0.02 } else { 0.0 };
    let mut m = Mask::from_fn(h, w, |y, x| {
        spec.iter().any(|&(cy, cx, r, disc)| {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            if disc {
                dy * dy + dx * dx <= r * r
            } else {
                dy.abs() <= r && dx.abs() <= 0.6 * r
            }
        })
    });
    if salt > 0.0 {
        for y in 0..h {
            for x in 0..w {
                if rng.uniform() < salt {
                    m.set(y, x, true);
                }
            }
        }
    }
    m
}

pub fn dims(rng: &mut Rng, max: usize) -> (usize, usize) {
    (1 + (rng.uniform() * max as f64) as usize, 1 + (rng.uniform() * max as f64) as usize)
}

pub fn brute_counts(p: &Mask, g: &Mask) -> (usize, usize, usize) {
    let (mut inter, mut np, mut ng) = (0, 0, 0);
    for y in 0..p.height() {
        for x in 0..p.width() {
            let (a, b) = (p.get(y, x), g.get(y, x));
            inter += (a && b) as usize;
            np += a as usize;
            ng += b as usize;
        }
    }
    (inter, np, ng)
}

/// Dice as an exact fraction `(numerator, denominator)`; `(1, 1)` for two empty masks.
pub fn brute_dice_fraction(p: &Mask, g: &Mask) -> (usize, usize) {
    let (i, a, b) = brute_counts(p, g);
    if a + b == 0 {
        (1, 1)
    } else {
        (2 * i, a + b)
    }
}

/// Intersection over union, counted directly.
pub fn brute_jaccard(p: &Mask, g: &Mask) -> f64 {
    let (i, a, b) = brute_counts(p, g);
    let u = a + b - i;
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

fn inside(m: &Mask, y: isize, x: isize) -> bool {
    y >= 0 && x >= 0 && (y as usize) < m.height() && (x as usize) < m.width() && m.get(y as usize, x as usize)
}

/// Foreground pixels with a background (or off-image) 4-neighbour.
pub fn brute_boundary(m: &Mask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..m.height() as isize {
        for x in 0..m.width() as isize {
            if inside(m, y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !inside(m, y + dy, x + dx)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

fn mean_min_distance(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| {
                    let (dy, dx) = (y as f64 - v as f64, x as f64 - u as f64);
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / from.len() as f64
}

/// Mean of the two directed mean nearest-boundary distances, O(n^2).
pub fn brute_surface_distance(p: &Mask, g: &Mask, spacing: f64) -> Option<f64> {
    let (bp, bg) = (brute_boundary(p), brute_boundary(g));
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    Some(0.5 * (mean_min_distance(&bp, &bg) + mean_min_distance(&bg, &bp)) * spacing)
}

/// `|p - 1| < eps` computed pixel by pixel.
pub fn brute_certain(p: &[f64], h: usize, w: usize, eps: f64) -> Mask {
    Mask::from_fn(h, w, |y, x| (p[y * w + x] - 1.0).abs() < eps)
}

/// Per-pixel strict majority.
pub fn brute_vote(masks: &[&Mask]) -> Mask {
    let (h, w) = (masks[0].height(), masks[0].width());
    Mask::from_fn(h, w, |y, x| 2 * masks.iter().filter(|m| m.get(y, x)).count() > masks.len())
}

/// Two-sided Wilcoxon signed-rank p-value by enumerating all `2^n` sign
/// assignments of the midranks; zeros dropped.
pub fn brute_wilcoxon(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let ranks: Vec<f64> = d
        .iter()
        .map(|v| {
            let less = d.iter().filter(|u| u.abs() < v.abs()).count() as f64;
            let equal = d.iter().filter(|u| u.abs() == v.abs()).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total: f64 = ranks.iter().sum();
    let observed = w_plus.min(total - w_plus);
    let mut at_most = 0u64;
    for signs in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= observed + 1e-9 {
            at_most += 1;
        }
    }
    (2.0 * at_most as f64 / (1u64 << n) as f64).min(1.0)
}
