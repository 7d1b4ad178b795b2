//! The JSON run configuration shared by `train` and `eval`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cxrseg::data::{Encoding, LungMode, SplitScheme, SPLIT_PRESETS};
use cxrseg::model::{ArchConfig, Architecture, Head};
use cxrseg::tensor::Activation;
use cxrseg::train::{AdamConfig, LossConfig, TrainConfig};
use cxrseg::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub arch: ArchSection,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n: usize,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { n: 16, seed: 0 }
    }
}

/// Either `root` (a directory with `images/` and `masks/`) or `synthetic`;
/// with neither, synthetic data with the default `n` and `seed` is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub root: Option<PathBuf>,
    pub synthetic: Option<SynthSection>,
    pub resolution: usize,
    /// Must match the loss when given; derived from it otherwise.
    pub encoding: Option<Encoding>,
    pub lung_mode: LungMode,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            synthetic: None,
            resolution: 64,
            encoding: None,
            lung_mode: LungMode::AsStored,
        }
    }
}

/// [`ArchConfig`] fields; the optional ones are derived from the loss and
/// the data resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub arch: Architecture,
    pub input_resolution: Option<usize>,
    pub in_channels: usize,
    pub num_classes: Option<usize>,
    pub activation: Activation,
    pub drop_probability: f64,
    pub head: Option<Head>,
    pub base_channels: usize,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            arch: Architecture::Invertednet,
            input_resolution: None,
            in_channels: 1,
            num_classes: None,
            activation: Activation::Elu,
            drop_probability: ArchConfig::DEFAULT_DROP_PROBABILITY,
            head: None,
            base_channels: ArchConfig::DEFAULT_BASE_CHANNELS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub scheme: SplitScheme,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let (train, valid, test) = SPLIT_PRESETS[0];
        Self {
            scheme: SplitScheme::Fractions { train, valid, test },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub target_validation_j: Option<f64>,
    pub record_time: bool,
    /// Also write `epoch_<k>.fcxs` every this many epochs.
    pub checkpoint_every: Option<usize>,
    pub split: SplitSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            patience: t.patience,
            min_delta: t.min_delta,
            seed: t.seed,
            adam: t.adam,
            target_validation_j: t.target_validation_j,
            record_time: t.record_time,
            checkpoint_every: None,
            split: SplitSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub epsilon: f64,
    pub spacing: f64,
    pub surface_distance: bool,
    pub export_masks: bool,
    pub overlays: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            epsilon: cxrseg::eval::DEFAULT_EPSILON,
            spacing: 1.0,
            surface_distance: true,
            export_masks: true,
            overlays: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
    }

    /// Fills every derived field, then validates the whole document and
    /// reports all problems at once.
    pub fn resolve(mut self) -> Result<Self> {
        if self.data.root.is_none() && self.data.synthetic.is_none() {
            self.data.synthetic = Some(SynthSection::default());
        }
        let head = *self.arch.head.get_or_insert(self.loss.required_head());
        self.arch.num_classes.get_or_insert(head.num_classes());
        self.arch.input_resolution.get_or_insert(self.data.resolution);
        self.data.encoding.get_or_insert(head.encoding());

        let mut errors = Vec::new();
        if self.data.root.is_some() && self.data.synthetic.is_some() {
            errors.push("data: give either root or synthetic, not both".to_string());
        }
        if self.data.synthetic.is_some_and(|s| s.n == 0) {
            errors.push("data.synthetic.n must be at least 1".to_string());
        }
        if self.arch.input_resolution != Some(self.data.resolution) {
            errors.push(format!(
                "arch.input_resolution {:?} differs from data.resolution {}",
                self.arch.input_resolution, self.data.resolution
            ));
        }
        if self.data.encoding != Some(head.encoding()) {
            errors.push(format!(
                "data.encoding {:?} does not match the {head:?} head",
                self.data.encoding
            ));
        }
        if let Err(e) = self.loss.check_pairing(head) {
            errors.extend(messages(e));
        }
        if let Err(e) = self.arch_config().validate() {
            errors.extend(messages(e));
        }
        errors.extend(self.train_config().validate());
        if let Err(e) = self.train.split.scheme.validate() {
            errors.extend(messages(e));
        }
        if self.train.checkpoint_every == Some(0) {
            errors.push("train.checkpoint_every must be positive".to_string());
        }
        if !(self.eval.spacing > 0.0 && self.eval.spacing.is_finite()) {
            errors.push(format!("eval.spacing {} must be positive", self.eval.spacing));
        }
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Valid after [`RunConfig::resolve`].
    pub fn arch_config(&self) -> ArchConfig {
        let head = self.arch.head.unwrap_or(self.loss.required_head());
        ArchConfig {
            arch: self.arch.arch,
            input_resolution: self.arch.input_resolution.unwrap_or(self.data.resolution),
            in_channels: self.arch.in_channels,
            num_classes: self.arch.num_classes.unwrap_or(head.num_classes()),
            activation: self.arch.activation,
            drop_probability: self.arch.drop_probability,
            head,
            base_channels: self.arch.base_channels,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            patience: t.patience,
            min_delta: t.min_delta,
            seed: t.seed,
            adam: t.adam,
            epsilon: self.eval.epsilon,
            target_validation_j: t.target_validation_j,
            record_time: t.record_time,
        }
    }

    pub fn encoding(&self) -> Encoding {
        self.arch_config().head.encoding()
    }
}

fn messages(e: Error) -> Vec<String> {
    match e {
        Error::Config(list) => list,
        other => vec![other.to_string()],
    }
}
