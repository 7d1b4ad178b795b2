use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Supported (train, valid, test) fractions.
pub const SPLIT_PRESETS: [(f64, f64, f64); 3] = [(0.60, 0.07, 0.33), (0.50, 0.17, 0.33), (0.45, 0.22, 0.33)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitScheme {
    /// Seeded shuffle cut into `round(n * train)`, `round(n * valid)` and the rest.
    Fractions { train: f64, valid: f64, test: f64 },
    /// Three near-equal test folds; the ids outside fold `fold` are divided
    /// between train and valid in the ratio `train : valid`.
    Threefold { fold: usize, train: f64, valid: f64 },
}

impl SplitScheme {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        match *self {
            SplitScheme::Fractions { train, valid, test } => {
                if [train, valid, test].iter().any(|f| !(0.0..=1.0).contains(f)) {
                    errors.push(format!("split fractions must lie in [0, 1], got {train}/{valid}/{test}"));
                }
                if (train + valid + test - 1.0).abs() > 1e-9 {
                    errors.push(format!("split fractions sum to {}, not 1", train + valid + test));
                }
            }
            SplitScheme::Threefold { fold, train, valid } => {
                if fold > 2 {
                    errors.push(format!("threefold fold index {fold} must be 0, 1 or 2"));
                }
                if train <= 0.0 || valid < 0.0 {
                    errors.push(format!("threefold train/valid ratio {train}:{valid} is invalid"));
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }
}

/// Disjoint id lists; this is also the JSON split manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub scheme: SplitScheme,
}

fn round_count(n: usize, f: f64) -> usize {
    ((n as f64 * f).round() as usize).min(n)
}

pub fn split_dataset(ids: &[String], scheme: &SplitScheme, seed: u64) -> Result<DatasetSplit> {
    scheme.validate()?;
    let mut order = ids.to_vec();
    Rng::new(seed).shuffle(&mut order);
    let n = order.len();
    let (train, valid, test) = match *scheme {
        SplitScheme::Fractions { train, valid, .. } => {
            let nt = round_count(n, train);
            let nv = round_count(n, valid).min(n - nt);
            let rest = order.split_off(nt + nv);
            let v = order.split_off(nt);
            (order, v, rest)
        }
        SplitScheme::Threefold { fold, train, valid } => {
            // fold k spans [start_k, start_k + size_k); the first n % 3 folds get one extra id
            let size = |k: usize| n / 3 + usize::from(k < n % 3);
            let start: usize = (0..fold).map(size).sum();
            let test: Vec<String> = order.drain(start..start + size(fold)).collect();
            let nv = round_count(order.len(), valid / (train + valid));
            let v = order.split_off(order.len() - nv);
            (order, v, test)
        }
    };
    Ok(DatasetSplit {
        train,
        valid,
        test,
        seed,
        scheme: scheme.clone(),
    })
}
