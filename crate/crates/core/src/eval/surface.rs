use crate::mask::Mask;

const INF: f64 = 1e20;

/// Squared Euclidean distance from every pixel to the nearest seed pixel
/// (exact, via the separable lower-envelope transform of Felzenszwalb and
/// Huttenlocher). Pixels are `INF` when there are no seeds.
pub(crate) fn squared_distance_map(height: usize, width: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![INF; height * width];
    for &(y, x) in seeds {
        grid[y * width + x] = 0.0;
    }
    if seeds.is_empty() {
        return grid;
    }
    let mut line = vec![0.0; height.max(width)];
    let mut out = vec![0.0; height.max(width)];
    for x in 0..width {
        for y in 0..height {
            line[y] = grid[y * width + x];
        }
        transform_1d(&line[..height], &mut out[..height]);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        line[..width].copy_from_slice(row);
        transform_1d(&line[..width], row);
    }
    grid
}

fn transform_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    // first finite sample anchors the envelope
    let Some(first) = f.iter().position(|&x| x < INF) else {
        d.fill(INF);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if f[q] >= INF {
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this never pops the last parabola
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, slot) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *slot = dq * dq + f[p];
    }
}

fn mean_nearest(from: &[(usize, usize)], field: &[f64], width: usize) -> f64 {
    let total: f64 = from.iter().map(|&(y, x)| field[y * width + x].sqrt()).sum();
    total / from.len() as f64
}

/// Symmetric mean absolute surface distance between the 4-connected
/// boundaries of two masks, scaled by `spacing`. `None` when either mask is
/// empty.
pub fn surface_distance_symmetric(pred: &Mask, truth: &Mask, spacing: f64) -> Option<f64> {
    assert!(pred.same_dims(truth), "mask dimensions differ");
    let (bp, bt) = (pred.boundary(), truth.boundary());
    if bp.is_empty() || bt.is_empty() {
        return None;
    }
    let (h, w) = (pred.height(), pred.width());
    let to_truth = squared_distance_map(h, w, &bt);
    let to_pred = squared_distance_map(h, w, &bp);
    let a = mean_nearest(&bp, &to_truth, w);
    let b = mean_nearest(&bt, &to_pred, w);
    // a + b == b + a, so swapping the arguments is exact
    Some(0.5 * (a + b) * spacing)
}
