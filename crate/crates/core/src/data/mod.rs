//! Samples, ground-truth encodings, normalization, splits and the synthetic
//! generator.

mod load;
mod norm;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

pub use load::{load_dataset, read_grayscale, resample_area, LoadReport};
pub use norm::{apply_norm, compute_norm_stats, NormStats, NORM_EPSILON};
pub use split::{split_dataset, DatasetSplit, SplitScheme, SPLIT_PRESETS};
pub use synth::{synth_generate, write_dataset};

/// Organ classes in mask order.
pub const CLASS_NAMES: [&str; 3] = ["lungs", "clavicles", "heart"];

/// A grayscale image with its lungs, clavicles and heart masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1, H, W]`.
    pub image: Tensor<f32>,
    pub masks: Vec<Mask>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, masks: Vec<Mask>) -> Result<Self> {
        let id = id.into();
        let (h, w) = match image.shape() {
            &[1, h, w] => (h, w),
            s => return Err(Error::dim(format!("sample {id}: image must be [1, H, W], got {s:?}"))),
        };
        if masks.len() != CLASS_NAMES.len() {
            return Err(Error::Data(format!("sample {id}: expected 3 masks, got {}", masks.len())));
        }
        if masks.iter().any(|m| m.height() != h || m.width() != w) {
            return Err(Error::dim(format!("sample {id}: masks must be {h}x{w}")));
        }
        Ok(Self { id, image, masks })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// Lungs, clavicles, heart; overlaps kept.
    Dice,
    /// Background, lungs without clavicles, clavicles, heart; a partition.
    Entropy,
}

/// How the stored lung masks relate to the clavicles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LungMode {
    /// Lung masks already include the clavicle region.
    #[default]
    AsStored,
    /// Lung masks exclude the clavicles; the dice encoding adds them back.
    UnionClavicles,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub encoding: Encoding,
    pub channels: Vec<Mask>,
}

/// Builds the per-encoding channel stack. The entropy encoding resolves
/// overlaps with priority clavicles > heart > lungs.
pub fn build_groundtruth(sample: &Sample, encoding: Encoding, lung_mode: LungMode) -> GroundTruth {
    let [lungs, clavicles, heart] = [&sample.masks[0], &sample.masks[1], &sample.masks[2]];
    let channels = match encoding {
        Encoding::Dice => {
            let lungs = match lung_mode {
                LungMode::AsStored => lungs.clone(),
                LungMode::UnionClavicles => lungs.union(clavicles),
            };
            vec![lungs, clavicles.clone(), heart.clone()]
        }
        Encoding::Entropy => {
            let heart = heart.difference(clavicles);
            let lungs = lungs.difference(clavicles).difference(&heart);
            let background = lungs.union(clavicles).union(&heart).complement();
            vec![background, lungs, clavicles.clone(), heart]
        }
    };
    GroundTruth { encoding, channels }
}

impl GroundTruth {
    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    /// Projection onto class `l` (channel index of the encoding).
    pub fn project_class(&self, l: usize) -> Result<Mask> {
        if self.encoding == Encoding::Entropy {
            // read back through the label matrix
            let g = self.label_matrix()?;
            if l >= self.channels.len() {
                return Err(Error::Parameter(format!("class {l} out of range for the entropy encoding")));
            }
            return Mask::from_bits(self.height(), self.width(), g.iter().map(|&v| v as usize == l).collect());
        }
        self.channels
            .get(l)
            .cloned()
            .ok_or_else(|| Error::Parameter(format!("class {l} out of range for the dice encoding")))
    }

    /// `G = sum_l l * M_l`; only defined for the partitioning entropy encoding.
    pub fn label_matrix(&self) -> Result<Vec<u8>> {
        if self.encoding != Encoding::Entropy {
            return Err(Error::Parameter("label matrix needs the entropy encoding".into()));
        }
        let n = self.height() * self.width();
        let mut g = vec![0u8; n];
        for (l, m) in self.channels.iter().enumerate() {
            for (v, &b) in g.iter_mut().zip(m.bits()) {
                if b {
                    *v += l as u8;
                }
            }
        }
        Ok(g)
    }

    /// Organ channels (lungs, clavicles, heart) used for scoring.
    pub fn organs(&self) -> &[Mask] {
        match self.encoding {
            Encoding::Dice => &self.channels,
            Encoding::Entropy => &self.channels[1..],
        }
    }

    /// Channels as a `[1, C, H, W]` 0/1 tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w) = (self.height(), self.width());
        let mut data = Vec::with_capacity(self.channels.len() * h * w);
        for m in &self.channels {
            data.extend(m.bits().iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
        }
        Tensor::new(vec![1, self.channels.len(), h, w], data).expect("consistent channel sizes")
    }
}
