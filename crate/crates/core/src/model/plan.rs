use super::{ArchConfig, Architecture};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    TransposedConv,
}

/// One convolution (or 2x2 stride-2 transposed convolution) with bias.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub transposed: bool,
    /// Position in [`ArchPlan::layers`].
    pub slot: usize,
}

impl ConvSpec {
    pub fn conv(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, slot: usize) -> Self {
        Self {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            transposed: false,
            slot,
        }
    }

    pub fn up(name: impl Into<String>, cin: usize, cout: usize, slot: usize) -> Self {
        Self {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel: 2,
            stride: 2,
            transposed: true,
            slot,
        }
    }

    pub fn kind(&self) -> LayerKind {
        if self.transposed {
            LayerKind::TransposedConv
        } else {
            LayerKind::Conv
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        if self.transposed {
            vec![self.in_channels, self.out_channels, 2, 2]
        } else {
            vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
        }
    }

    pub fn fan_in(&self) -> usize {
        if self.transposed {
            self.in_channels
        } else {
            self.in_channels * self.kernel * self.kernel
        }
    }

    /// `k^2 * C_in * C_out + C_out`.
    pub fn parameter_count(&self) -> u64 {
        (self.kernel * self.kernel * self.in_channels * self.out_channels + self.out_channels) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Downsample {
    MaxPool { stride: usize },
    /// Learned pooling: 3x3 stride-2 convolution keeping the channel count.
    Conv(ConvSpec),
}

/// Contraction level: its convolutions, then the transition to the next level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderLevel {
    pub convs: Vec<ConvSpec>,
    pub down: Option<Downsample>,
}

/// Expansion level: upsampling, skip concatenation, convolutions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderLevel {
    pub up: ConvSpec,
    pub convs: Vec<ConvSpec>,
}

/// Row of the per-layer parameter ledger.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerRow {
    pub name: String,
    pub kind: LayerKind,
    pub weight_shape: Vec<usize>,
    pub stride: usize,
    pub parameters: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchPlan {
    pub encoder: Vec<EncoderLevel>,
    pub decoder: Vec<DecoderLevel>,
    pub head: ConvSpec,
}

struct SlotCounter(usize);

impl SlotCounter {
    fn next(&mut self) -> usize {
        self.0 += 1;
        self.0 - 1
    }
}

impl ArchPlan {
    pub fn new(config: &ArchConfig) -> Result<Self> {
        config.validate()?;
        let b = config.base_channels;
        let mut slot = SlotCounter(0);
        let (channels, first_strides, downs): (Vec<usize>, Vec<usize>, Vec<Option<usize>>) = match config.arch {
            // (pool stride after level, stride of the first conv of level)
            Architecture::Invertednet => (
                vec![4 * b, 2 * b, b, b / 2, b / 4],
                vec![1, 1, 2, 2, 2],
                vec![Some(2), Some(1), Some(1), Some(1), None],
            ),
            _ => (
                vec![b, 2 * b, 4 * b, 8 * b, 16 * b],
                vec![1; 5],
                vec![Some(2), Some(2), Some(2), Some(2), None],
            ),
        };

        let mut encoder = Vec::with_capacity(channels.len());
        let mut cin = config.in_channels;
        for (i, &c) in channels.iter().enumerate() {
            let convs = vec![
                ConvSpec::conv(format!("enc{i}.conv0"), cin, c, 3, first_strides[i], slot.next()),
                ConvSpec::conv(format!("enc{i}.conv1"), c, c, 3, 1, slot.next()),
            ];
            let down = downs[i].map(|stride| match config.arch {
                Architecture::AllConvolutional => {
                    Downsample::Conv(ConvSpec::conv(format!("enc{i}.down"), c, c, 3, 2, slot.next()))
                }
                _ => Downsample::MaxPool { stride },
            });
            encoder.push(EncoderLevel { convs, down });
            cin = c;
        }

        let mut decoder = Vec::with_capacity(channels.len() - 1);
        for i in (0..channels.len() - 1).rev() {
            let c = channels[i];
            let up = ConvSpec::up(format!("dec{i}.up"), channels[i + 1], c, slot.next());
            let convs = vec![
                ConvSpec::conv(format!("dec{i}.conv0"), 2 * c, c, 3, 1, slot.next()),
                ConvSpec::conv(format!("dec{i}.conv1"), c, c, 3, 1, slot.next()),
            ];
            decoder.push(DecoderLevel { up, convs });
        }
        let head = ConvSpec::conv("head", channels[0], config.num_classes, 1, 1, slot.next());
        Ok(Self {
            encoder,
            decoder,
            head,
        })
    }

    /// Every parameterized layer in slot order.
    pub fn layers(&self) -> Vec<&ConvSpec> {
        let mut out = Vec::new();
        for level in &self.encoder {
            out.extend(level.convs.iter());
            if let Some(Downsample::Conv(spec)) = &level.down {
                out.push(spec);
            }
        }
        for level in &self.decoder {
            out.push(&level.up);
            out.extend(level.convs.iter());
        }
        out.push(&self.head);
        debug_assert!(out.iter().enumerate().all(|(i, s)| s.slot == i));
        out
    }

    pub fn parameter_count(&self) -> u64 {
        self.layers().iter().map(|s| s.parameter_count()).sum()
    }

    /// `(name, shape)` of every parameter tensor in storage order.
    pub fn parameter_manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.layers()
            .iter()
            .flat_map(|s| {
                [
                    (format!("{}.weight", s.name), s.weight_shape()),
                    (format!("{}.bias", s.name), vec![s.out_channels]),
                ]
            })
            .collect()
    }

    pub fn ledger(&self) -> Vec<LedgerRow> {
        self.layers()
            .iter()
            .map(|s| LedgerRow {
                name: s.name.clone(),
                kind: s.kind(),
                weight_shape: s.weight_shape(),
                stride: s.stride,
                parameters: s.parameter_count(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Head;

    /// Closed-form count: sum of k^2 * C_in * C_out + C_out over the layer list.
    fn closed_form(layers: &[(usize, usize, usize)]) -> u64 {
        layers.iter().map(|&(k, ci, co)| (k * k * ci * co + co) as u64).sum()
    }

    fn unet_layers(base: usize, classes: usize) -> Vec<(usize, usize, usize)> {
        let ch: Vec<usize> = (0..5).map(|i| base << i).collect();
        let mut v = vec![(3, 1, ch[0]), (3, ch[0], ch[0])];
        for i in 1..5 {
            v.push((3, ch[i - 1], ch[i]));
            v.push((3, ch[i], ch[i]));
        }
        for i in (0..4).rev() {
            v.push((2, ch[i + 1], ch[i]));
            v.push((3, 2 * ch[i], ch[i]));
            v.push((3, ch[i], ch[i]));
        }
        v.push((1, ch[0], classes));
        v
    }

    #[test]
    fn unet_count_matches_closed_form() {
        let cfg = ArchConfig::new(Architecture::AllDropout, 256, Head::Softmax);
        let plan = ArchPlan::new(&cfg).unwrap();
        assert_eq!(plan.parameter_count(), closed_form(&unet_layers(64, 4)));
        assert_eq!(plan.parameter_count(), 31_030_788);
    }

    #[test]
    fn all_convolutional_delta() {
        let d = ArchPlan::new(&ArchConfig::new(Architecture::AllDropout, 256, Head::Softmax)).unwrap();
        let c = ArchPlan::new(&ArchConfig::new(Architecture::AllConvolutional, 256, Head::Softmax)).unwrap();
        let delta: u64 = [64u64, 128, 256, 512].iter().map(|&c| 9 * c * c + c).sum();
        assert_eq!(delta, 3_134_400);
        assert_eq!(c.parameter_count() - d.parameter_count(), delta);
    }

    #[test]
    fn invertednet_schedule_and_count() {
        let plan = ArchPlan::new(&ArchConfig::new(Architecture::Invertednet, 256, Head::Softmax)).unwrap();
        assert_eq!(plan.encoder[0].convs[0].out_channels, 256);
        assert_eq!(plan.encoder[4].convs[1].out_channels, 16);
        let strides: Vec<usize> = plan.encoder.iter().map(|l| l.convs[0].stride).collect();
        assert_eq!(strides, vec![1, 1, 2, 2, 2]);
        let pools: Vec<Option<Downsample>> = plan.encoder.iter().map(|l| l.down.clone()).collect();
        assert_eq!(pools[0], Some(Downsample::MaxPool { stride: 2 }));
        assert_eq!(pools[1], Some(Downsample::MaxPool { stride: 1 }));
        assert_eq!(pools[4], None);
        assert_eq!(plan.parameter_count(), 3_707_268);
    }

    #[test]
    fn manifest_is_weight_then_bias() {
        let plan = ArchPlan::new(&ArchConfig::new(Architecture::UnetOriginal, 16, Head::Sigmoid).with_base_channels(4)).unwrap();
        let m = plan.parameter_manifest();
        assert_eq!(m[0], ("enc0.conv0.weight".to_string(), vec![4, 1, 3, 3]));
        assert_eq!(m[1], ("enc0.conv0.bias".to_string(), vec![4]));
        assert_eq!(m.len(), 2 * plan.layers().len());
        let dec_up = m.iter().find(|(n, _)| n == "dec3.up.weight").unwrap();
        assert_eq!(dec_up.1, vec![64, 32, 2, 2]);
    }
}
