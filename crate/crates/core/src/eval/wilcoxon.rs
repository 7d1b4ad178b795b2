use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest number of non-zero differences handled by the exact null distribution.
pub const EXACT_MAX_N: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Exact for `n <= 25`, normal approximation above.
    Auto,
    Exact,
    Normal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

impl WilcoxonResult {
    pub fn statistic(&self) -> f64 {
        self.w_plus.min(self.w_minus)
    }
}

/// Two-sided Wilcoxon signed-rank p-value of the paired samples `a`, `b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(wilcoxon_signed_rank_with(a, b, WilcoxonMethod::Auto)?.p_value)
}

/// Zero differences are dropped and tied magnitudes get midranks. With no
/// differences left the p-value is 1.
pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], method: WilcoxonMethod) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Parameter(format!(
            "wilcoxon needs paired samples, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("wilcoxon: non-finite difference".into()));
    }
    diffs.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let n = diffs.len();
    let method = match method {
        WilcoxonMethod::Auto if n <= EXACT_MAX_N => WilcoxonMethod::Exact,
        WilcoxonMethod::Auto => WilcoxonMethod::Normal,
        m => m,
    };
    if n == 0 {
        return Ok(WilcoxonResult {
            n,
            w_plus: 0.0,
            w_minus: 0.0,
            p_value: 1.0,
            method,
        });
    }

    // doubled midranks are integers: tie group at sorted positions i..j gets i + j + 1
    let mut doubled = vec![0usize; n];
    let mut tie_groups = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        for r in &mut doubled[i..=j] {
            *r = i + j + 2;
        }
        tie_groups.push(j - i + 1);
        i = j + 1;
    }
    let w_plus2: usize = diffs.iter().zip(&doubled).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total2 = n * (n + 1);
    let w_minus2 = total2 - w_plus2;
    let w2 = w_plus2.min(w_minus2);

    let p_value = match method {
        WilcoxonMethod::Exact => {
            if n > 64 {
                return Err(Error::Parameter(format!("exact wilcoxon limited to n <= 64, got {n}")));
            }
            (2.0 * exact_lower_tail(&doubled, w2)).min(1.0)
        }
        _ => normal_p(n, &tie_groups, w2 as f64 / 2.0),
    };
    Ok(WilcoxonResult {
        n,
        w_plus: w_plus2 as f64 / 2.0,
        w_minus: w_minus2 as f64 / 2.0,
        p_value,
        method,
    })
}

/// `P(W+ <= w)` under the null (each sign independently +/- with probability
/// 1/2), by dynamic programming over the doubled ranks.
fn exact_lower_tail(doubled: &[usize], w2: usize) -> f64 {
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all = 2f64.powi(doubled.len() as i32);
    counts[..=w2].iter().sum::<f64>() / all
}

fn normal_p(n: usize, tie_groups: &[usize], w: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let ties: f64 = tie_groups.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((mean - w).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * normal.sf(z)).min(1.0)
}
