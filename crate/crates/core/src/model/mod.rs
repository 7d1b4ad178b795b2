//! U-Net style encoder/decoder architectures.
//!
//! Every architecture is described by an [`ArchPlan`] (a list of convolution
//! specs grouped into contraction levels, expansion levels and a 1x1 head)
//! and materialized as a [`Network`] holding the parameters in a [`Graph`].

mod checkpoint;
mod ensemble;
mod plan;

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::Encoding;
use crate::error::{Error, Result};
use crate::eval::certain_pixels;
use crate::mask::Mask;
use crate::tensor::{Activation, Graph, NodeId, ParamId, Real, Rng, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use ensemble::{ensemble_predict, majority_vote};
pub use plan::{ArchPlan, ConvSpec, DecoderLevel, Downsample, EncoderLevel, LayerKind, LedgerRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    UnetOriginal,
    AllDropout,
    AllConvolutional,
    Invertednet,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::UnetOriginal,
        Architecture::AllDropout,
        Architecture::AllConvolutional,
        Architecture::Invertednet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::UnetOriginal => "unet_original",
            Architecture::AllDropout => "all_dropout",
            Architecture::AllConvolutional => "all_convolutional",
            Architecture::Invertednet => "invertednet",
        }
    }

    /// Published parameter count at 256x256 with a four-channel head, when known.
    pub fn reference_parameter_count(self) -> Option<u64> {
        match self {
            Architecture::UnetOriginal => None,
            Architecture::AllDropout => Some(31_377_988),
            Architecture::AllConvolutional => Some(34_512_388),
            Architecture::Invertednet => Some(3_140_771),
        }
    }

    pub fn has_dropout(self) -> bool {
        self != Architecture::UnetOriginal
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown architecture {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Sigmoid,
    Softmax,
}

impl Head {
    /// Output channels: three organ maps, plus background for softmax.
    pub fn num_classes(self) -> usize {
        match self {
            Head::Sigmoid => 3,
            Head::Softmax => 4,
        }
    }

    /// Ground-truth encoding matching this head.
    pub fn encoding(self) -> Encoding {
        match self {
            Head::Sigmoid => Encoding::Dice,
            Head::Softmax => Encoding::Entropy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub arch: Architecture,
    pub input_resolution: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub activation: Activation,
    pub drop_probability: f64,
    pub head: Head,
    /// First-level width of the U-Net variants (64 in the reference
    /// networks). InvertedNet uses `4 * base` at full resolution, down to
    /// `base / 4` at the bottleneck.
    pub base_channels: usize,
}

impl ArchConfig {
    pub const DEFAULT_DROP_PROBABILITY: f64 = 0.1;
    pub const DEFAULT_BASE_CHANNELS: usize = 64;

    pub fn new(arch: Architecture, input_resolution: usize, head: Head) -> Self {
        Self {
            arch,
            input_resolution,
            in_channels: 1,
            num_classes: head.num_classes(),
            activation: Activation::Elu,
            drop_probability: Self::DEFAULT_DROP_PROBABILITY,
            head,
            base_channels: Self::DEFAULT_BASE_CHANNELS,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    pub fn with_drop_probability(mut self, d: f64) -> Self {
        self.drop_probability = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.input_resolution == 0 || self.input_resolution % 16 != 0 {
            errors.push(format!(
                "input_resolution {} must be a positive multiple of 16",
                self.input_resolution
            ));
        }
        if self.in_channels == 0 {
            errors.push("in_channels must be positive".to_string());
        }
        if self.num_classes != self.head.num_classes() {
            errors.push(format!(
                "{:?} head needs num_classes = {}, got {}",
                self.head,
                self.head.num_classes(),
                self.num_classes
            ));
        }
        if self.activation == Activation::Sigmoid {
            errors.push("hidden activation must be relu or elu".to_string());
        }
        if !(0.0..1.0).contains(&self.drop_probability) {
            errors.push(format!(
                "drop_probability {} must lie in [0, 1)",
                self.drop_probability
            ));
        }
        if self.base_channels == 0 || self.base_channels % 4 != 0 {
            errors.push(format!(
                "base_channels {} must be a positive multiple of 4",
                self.base_channels
            ));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Output channels holding the lungs, clavicles and heart maps.
    pub fn organ_channels(&self) -> Range<usize> {
        match self.head {
            Head::Sigmoid => 0..3,
            Head::Softmax => 1..4,
        }
    }
}

/// Forward-pass mode. Training draws dropout noise from the given generator.
pub enum Mode<'a> {
    Train(&'a mut Rng),
    Infer,
}

/// A built architecture with its parameters.
pub struct Network<T: Real> {
    config: ArchConfig,
    plan: ArchPlan,
    graph: Graph<T>,
    /// (weight, bias) per [`ConvSpec::slot`].
    slots: Vec<(ParamId, ParamId)>,
}

impl<T: Real> Network<T> {
    /// Builds the configured architecture with seeded fan-in-scaled uniform
    /// weights (bound `sqrt(3 / fan_in)`, unit gain) and zero biases.
    ///
    /// The ReLU gain of 2 lets activations grow through the ELU stacks until
    /// the sigmoid head saturates at initialization; large Dice classes then
    /// stall in the all-foreground state.
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        Self::with_init_gain(config, seed, 1.0)
    }

    /// As [`Network::new`] with weight variance `gain / fan_in` (2 is He).
    pub fn with_init_gain(config: ArchConfig, seed: u64, gain: f64) -> Result<Self> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::Parameter(format!("init gain {gain} must be positive")));
        }
        let plan = ArchPlan::new(&config)?;
        let mut rng = Rng::new(seed);
        let mut graph = Graph::new();
        let mut slots = Vec::with_capacity(plan.layers().len());
        for spec in plan.layers() {
            let bound = (3.0 * gain / spec.fan_in() as f64).sqrt();
            let w = Tensor::from_fn(&spec.weight_shape(), |_| T::lit(rng.uniform_range(-bound, bound)));
            let wid = graph.add_parameter(format!("{}.weight", spec.name), w);
            let bid = graph.add_parameter(format!("{}.bias", spec.name), Tensor::zeros(&[spec.out_channels]));
            slots.push((wid, bid));
        }
        Ok(Self {
            config,
            plan,
            graph,
            slots,
        })
    }

    /// Rebuilds a network from named parameters in plan order.
    pub fn from_parameters(config: ArchConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let plan = ArchPlan::new(&config)?;
        let expected = plan.parameter_manifest();
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        let mut graph = Graph::new();
        let mut ids = Vec::with_capacity(params.len());
        for ((name, shape), (got_name, tensor)) in expected.iter().zip(params) {
            if *name != got_name || shape.as_slice() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    tensor.shape()
                )));
            }
            ids.push(graph.add_parameter(got_name, tensor));
        }
        let slots = ids.chunks(2).map(|c| (c[0], c[1])).collect();
        Ok(Self {
            config,
            plan,
            graph,
            slots,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn plan(&self) -> &ArchPlan {
        &self.plan
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    pub fn parameter_count(&self) -> u64 {
        count_parameters(self)
    }

    pub fn zero_parameters(&mut self) {
        for p in self.graph.parameters_mut() {
            p.value.data_mut().fill(T::zero());
        }
    }

    /// Converts the parameters to another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let params = self
            .graph
            .parameters()
            .iter()
            .map(|p| (p.name.clone(), p.value.cast::<U>()))
            .collect();
        Network::from_parameters(self.config.clone(), params).expect("same plan")
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = batch.dims4()?;
        let r = self.config.input_resolution;
        if c != self.config.in_channels || h != r || w != r {
            return Err(Error::dim(format!(
                "network expects [N, {}, {r}, {r}], got {:?}",
                self.config.in_channels,
                batch.shape()
            )));
        }
        Ok(())
    }

    fn conv(&self, g: &mut Graph<T>, x: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        let (w, b) = self.slots[spec.slot];
        let (wn, bn) = (g.param(w), g.param(b));
        if spec.transposed {
            g.conv_transpose2d(x, wn, bn)
        } else {
            g.conv2d(x, wn, bn, spec.stride)
        }
    }

    /// Convolution, hidden activation and (where the architecture has it) dropout.
    fn conv_block(&self, g: &mut Graph<T>, x: NodeId, spec: &ConvSpec, mode: &mut Mode<'_>) -> Result<NodeId> {
        let y = self.conv(g, x, spec)?;
        let y = g.activation(y, self.config.activation)?;
        if !self.config.arch.has_dropout() {
            return Ok(y);
        }
        let rng = match mode {
            Mode::Train(rng) => Some(&mut **rng),
            Mode::Infer => None,
        };
        g.gaussian_dropout(y, self.config.drop_probability, rng)
    }

    /// Records the forward pass on a fresh tape and returns the output node
    /// (per-class probability maps, `[N, num_classes, H, W]`).
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode<'_>) -> Result<NodeId> {
        let mut g = std::mem::take(&mut self.graph);
        g.clear();
        let out = self.record_forward(&mut g, batch, mode);
        self.graph = g;
        out
    }

    /// Records the forward pass onto `g`, which must hold this network's
    /// parameters (for instance the graph taken out of [`Network::graph_mut`]).
    pub fn record_forward(&self, g: &mut Graph<T>, batch: &Tensor<T>, mut mode: Mode<'_>) -> Result<NodeId> {
        self.check_batch(batch)?;
        if g.parameters().len() != self.slots.len() * 2 {
            return Err(Error::State("graph does not hold this network's parameters".into()));
        }
        let plan = &self.plan;
        let mut x = g.input(batch.clone());
        let mut skips = Vec::with_capacity(plan.encoder.len());
        for (i, level) in plan.encoder.iter().enumerate() {
            for spec in &level.convs {
                x = self.conv_block(g, x, spec, &mut mode)?;
            }
            g.set_label(x, format!("enc{i}"));
            match &level.down {
                None => {}
                Some(Downsample::MaxPool { stride }) => {
                    skips.push(x);
                    x = g.maxpool2d(x, *stride)?;
                    g.set_label(x, format!("enc{i}.down"));
                }
                Some(Downsample::Conv(spec)) => {
                    skips.push(x);
                    x = self.conv_block(g, x, spec, &mut mode)?;
                    g.set_label(x, format!("enc{i}.down"));
                }
            }
        }
        for level in &plan.decoder {
            x = self.conv(g, x, &level.up)?;
            let skip = skips.pop().ok_or_else(|| Error::State("decoder deeper than encoder".into()))?;
            x = g.concat_channels(skip, x)?;
            for spec in &level.convs {
                x = self.conv_block(g, x, spec, &mut mode)?;
            }
            g.set_label(x, level.up.name.replace(".up", ""));
        }
        let logits = self.conv(g, x, &plan.head)?;
        g.set_label(logits, "logits");
        let out = match self.config.head {
            Head::Sigmoid => g.activation(logits, Activation::Sigmoid)?,
            Head::Softmax => g.softmax_channels(logits)?,
        };
        g.set_label(out, "output");
        Ok(out)
    }

    /// Inference forward pass; returns the per-class maps and drops the tape.
    pub fn predict(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.forward(batch, Mode::Infer)?;
        let value = self.graph.value(out)?.clone();
        self.graph.clear();
        Ok(value)
    }

    /// Certain-pixel masks of the organ channels for every batch item.
    pub fn predict_masks(&mut self, batch: &Tensor<T>, epsilon: f64) -> Result<Vec<Vec<Mask>>> {
        let probs = self.predict(batch)?;
        masks_from_probabilities(&probs, self.config.organ_channels(), epsilon)
    }

    /// `(label, shape)` of the labelled activations of the last forward pass.
    pub fn activation_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.graph.labelled_shapes()
    }
}

/// Sum of element counts of all weight and bias tensors.
pub fn count_parameters<T: Real>(net: &Network<T>) -> u64 {
    net.graph.parameters().iter().map(|p| p.value.len() as u64).sum()
}

pub(crate) fn masks_from_probabilities<T: Real>(
    probs: &Tensor<T>,
    channels: Range<usize>,
    epsilon: f64,
) -> Result<Vec<Vec<Mask>>> {
    let (n, c, h, w) = probs.dims4()?;
    if channels.end > c {
        return Err(Error::dim(format!("channels {channels:?} out of {c}")));
    }
    let plane = h * w;
    (0..n)
        .map(|b| {
            channels
                .clone()
                .map(|ch| {
                    let start = (b * c + ch) * plane;
                    let p: Vec<f64> = probs.data()[start..start + plane].iter().map(|v| v.as_f64()).collect();
                    certain_pixels(&p, h, w, epsilon)
                })
                .collect()
        })
        .collect()
}
