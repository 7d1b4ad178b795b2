use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

/// Below this standard deviation the data is treated as constant and only centered.
pub const NORM_EPSILON: f64 = 1e-8;

/// Global pixel mean and (population) standard deviation of a training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn scales(&self) -> bool {
        self.std >= NORM_EPSILON
    }
}

pub fn compute_norm_stats(train: &[Sample]) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::Data("normalization needs at least one training sample".into()));
    }
    let count: usize = train.iter().map(|s| s.image.len()).sum();
    let sum: f64 = train.iter().flat_map(|s| s.image.data()).map(|&v| v as f64).sum();
    let mean = sum / count as f64;
    let ss: f64 = train
        .iter()
        .flat_map(|s| s.image.data())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum();
    let stats = NormStats {
        mean,
        std: (ss / count as f64).sqrt(),
    };
    if !stats.scales() {
        log::warn!("training images are constant (std {:e}); centering without scaling", stats.std);
    }
    Ok(stats)
}

/// `(x - mean) / std`, or just `x - mean` for constant data.
pub fn apply_norm(sample: &Sample, stats: &NormStats) -> Sample {
    let scale = if stats.scales() { stats.std } else { 1.0 };
    let image = sample.image.map(|v| ((v as f64 - stats.mean) / scale) as f32);
    Sample {
        id: sample.id.clone(),
        image,
        masks: sample.masks.clone(),
    }
}
