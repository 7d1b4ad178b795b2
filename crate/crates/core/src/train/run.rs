use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{build_loss, AdamConfig, AdamState, LossConfig};
use crate::data::{build_groundtruth, Encoding, LungMode, Sample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::eval::{dice, jaccard_from_dice, DEFAULT_EPSILON};
use crate::mask::Mask;
use crate::model::{Mode, Network};
use crate::tensor::{Rng, Tensor};

pub const HISTORY_HEADER: &str = "epoch,loss,J_class0,J_class1,J_class2,seconds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation mean-J gain above `min_delta` before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Certain-pixel threshold for validation masks.
    pub epsilon: f64,
    /// Stop once validation mean J reaches this value.
    pub target_validation_j: Option<f64>,
    /// Fill the `seconds` history column (makes the history run-dependent).
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 2,
            patience: 50,
            min_delta: 1e-4,
            seed: 0,
            adam: AdamConfig::default(),
            epsilon: DEFAULT_EPSILON,
            target_validation_j: None,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = self.adam.validate();
        if self.epochs == 0 {
            errors.push("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            errors.push("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            errors.push("patience must be at least 1".into());
        }
        if !(self.min_delta >= 0.0) {
            errors.push(format!("min_delta {} must be non-negative", self.min_delta));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            errors.push(format!("epsilon {} must lie in (0, 1)", self.epsilon));
        }
        errors
    }
}

/// A normalized sample in network layout.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    /// `[1, 1, H, W]`.
    pub image: Tensor<f32>,
    /// `[1, C, H, W]` 0/1 ground-truth channels.
    pub target: Tensor<f32>,
    /// Lungs, clavicles, heart, for validation scoring.
    pub organs: Vec<Mask>,
}

pub fn prepare_items(samples: &[Sample], encoding: Encoding, lung_mode: LungMode) -> Result<Vec<TrainItem>> {
    samples
        .iter()
        .map(|s| {
            let gt = build_groundtruth(s, encoding, lung_mode);
            Ok(TrainItem {
                id: s.id.clone(),
                image: s.image.clone().reshape(vec![1, 1, s.height(), s.width()])?,
                target: gt.to_tensor(),
                organs: gt.organs().to_vec(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Validation J of lungs, clavicles, heart.
    pub jaccard: [f64; 3],
    pub seconds: Option<f64>,
}

impl EpochRecord {
    pub fn mean_jaccard(&self) -> f64 {
        self.jaccard.iter().sum::<f64>() / 3.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            let secs = r.seconds.map(|s| format!("{s:.3}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.loss, r.jaccard[0], r.jaccard[1], r.jaccard[2], secs
            );
        }
        out
    }

    /// First epoch whose validation mean J reaches `threshold`.
    pub fn first_epoch_reaching(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.mean_jaccard() >= threshold).map(|r| r.epoch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    MaxEpochs,
    Patience,
    TargetReached,
    /// Non-finite loss or gradient; the message says where.
    Diverged(String),
}

pub struct TrainOutcome {
    pub history: TrainHistory,
    pub best_epoch: Option<usize>,
    pub best_mean_jaccard: f64,
    pub stop: StopReason,
}

/// Passed to the per-epoch callback after the epoch's record is appended.
pub struct EpochEvent<'a> {
    pub net: &'a Network<f32>,
    pub record: &'a EpochRecord,
    /// Validation mean J improved (these are the weights that will be kept).
    pub improved: bool,
    /// No further epoch follows.
    pub last: bool,
}

/// Mean per-class J over `items`, using certain-pixel masks.
fn validation_jaccard(net: &mut Network<f32>, items: &[TrainItem], epsilon: f64) -> Result<[f64; 3]> {
    let mut acc = [0.0; 3];
    for item in items {
        let masks = net.predict_masks(&item.image, epsilon)?.remove(0);
        for (l, (p, t)) in masks.iter().zip(&item.organs).enumerate() {
            acc[l] += jaccard_from_dice(dice(p, t));
        }
    }
    Ok(acc.map(|s| s / items.len() as f64))
}

fn snapshot(net: &Network<f32>) -> Vec<Tensor<f32>> {
    net.graph().parameters().iter().map(|p| p.value.clone()).collect()
}

fn restore(net: &mut Network<f32>, values: Vec<Tensor<f32>>) {
    for (p, v) in net.graph_mut().parameters_mut().iter_mut().zip(values) {
        p.value = v;
    }
}

/// One pass over a minibatch: forward in train mode, loss, backward, ADAM step.
fn train_batch(
    net: &mut Network<f32>,
    adam: &mut AdamState<f32>,
    batch: &[&TrainItem],
    loss: &LossConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let images: Vec<Tensor<f32>> = batch.iter().map(|i| i.image.clone()).collect();
    let targets: Vec<Tensor<f32>> = batch.iter().map(|i| i.target.clone()).collect();
    let x = Tensor::stack_batch(&images)?;
    let target = Arc::new(Tensor::stack_batch(&targets)?);
    let out = net.forward(&x, Mode::Train(rng))?;
    let graph = net.graph_mut();
    let l = build_loss(graph, out, target, loss)?;
    let value = graph.value(l)?.data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    graph.backward(l)?;
    adam.step(graph)?;
    graph.clear();
    Ok(value)
}

/// Trains `net` in place and leaves it holding the best-validation weights.
///
/// Every epoch shuffles the training items (seeded) into consecutive
/// minibatches, then scores validation mean J; with no validation items the
/// training items are scored instead. Runs are bit-reproducible for a given
/// `config.seed`.
pub fn train(
    net: &mut Network<f32>,
    train_items: &[TrainItem],
    valid_items: &[TrainItem],
    loss: &LossConfig,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    let errors = config.validate();
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    loss.check_pairing(net.config().head)?;
    if train_items.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let channels = net.config().num_classes;
    if let Some(bad) = train_items.iter().find(|i| i.target.shape()[1] != channels) {
        return Err(Error::dim(format!(
            "item {} has {} target channels, network has {channels}",
            bad.id,
            bad.target.shape()[1]
        )));
    }
    let monitor = if valid_items.is_empty() { train_items } else { valid_items };

    let root = Rng::new(config.seed);
    let mut order_rng = root.fork(1);
    let mut noise_rng = root.fork(2);
    let mut adam = AdamState::new(net.graph(), config.adam);
    let mut history = TrainHistory::default();
    let mut best: Option<(usize, f64, Vec<Tensor<f32>>)> = None;
    let mut stale = 0;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        let mut diverged = None;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &train_items[i]).collect();
            match train_batch(net, &mut adam, &batch, loss, &mut noise_rng) {
                Ok(v) => {
                    total += v;
                    batches += 1;
                }
                Err(Error::Numeric(msg)) => {
                    diverged = Some(format!("epoch {epoch}: {msg}"));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(msg) = diverged {
            net.graph_mut().clear();
            log::error!("training diverged at {msg}");
            stop = StopReason::Diverged(msg);
            break;
        }
        let jaccard = validation_jaccard(net, monitor, config.epsilon)?;
        let record = EpochRecord {
            epoch,
            loss: total / batches as f64,
            jaccard,
            seconds: config.record_time.then(|| started.elapsed().as_secs_f64()),
        };
        let mean = record.mean_jaccard();
        let improved = best.as_ref().is_none_or(|(_, b, _)| mean > b + config.min_delta);
        if improved {
            best = Some((epoch, mean, snapshot(net)));
            stale = 0;
        } else {
            stale += 1;
        }
        log::info!(
            "epoch {epoch}: loss {:.6} J {} {:.4} {} {:.4} {} {:.4}",
            record.loss,
            CLASS_NAMES[0],
            jaccard[0],
            CLASS_NAMES[1],
            jaccard[1],
            CLASS_NAMES[2],
            jaccard[2]
        );
        let mut last = epoch == config.epochs;
        if config.target_validation_j.is_some_and(|t| mean >= t) {
            stop = StopReason::TargetReached;
            last = true;
        } else if stale >= config.patience {
            stop = StopReason::Patience;
            last = true;
        }
        history.records.push(record);
        on_epoch(&EpochEvent {
            net,
            record: history.records.last().expect("just pushed"),
            improved,
            last,
        })?;
        if last {
            break;
        }
    }

    let (best_epoch, best_mean_jaccard) = match best {
        Some((epoch, mean, values)) => {
            restore(net, values);
            (Some(epoch), mean)
        }
        None => (None, 0.0),
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_mean_jaccard,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::model::{ArchConfig, Architecture, Head};
    use crate::tensor::DistanceKind;

    fn setup() -> (Network<f32>, Vec<TrainItem>) {
        let samples = synth_generate(2, 16, 1).unwrap();
        let items = prepare_items(&samples, Encoding::Dice, LungMode::AsStored).unwrap();
        let cfg = ArchConfig::new(Architecture::AllDropout, 16, Head::Sigmoid).with_base_channels(4);
        (Network::new(cfg, 3).unwrap(), items)
    }

    #[test]
    fn history_has_one_row_per_epoch_and_is_reproducible() {
        let run = || {
            let (mut net, items) = setup();
            let cfg = TrainConfig {
                epochs: 3,
                adam: AdamConfig {
                    learning_rate: 1e-3,
                    ..AdamConfig::default()
                },
                ..TrainConfig::default()
            };
            let mut events = 0;
            let out = train(&mut net, &items, &[], &LossConfig::new(DistanceKind::Dice, true), &cfg, &mut |_| {
                events += 1;
                Ok(())
            })
            .unwrap();
            assert_eq!(events, 3);
            out.history.to_csv()
        };
        let a = run();
        assert_eq!(a.lines().count(), 4);
        assert!(a.starts_with(HISTORY_HEADER));
        assert!(a.lines().nth(1).unwrap().ends_with(','));
        assert_eq!(a, run());
    }

    #[test]
    fn rejects_bad_setups() {
        let (mut net, items) = setup();
        let ce = LossConfig::new(DistanceKind::CrossEntropy, false);
        let mut noop = |_: &EpochEvent<'_>| Ok(());
        assert!(matches!(train(&mut net, &items, &[], &ce, &TrainConfig::default(), &mut noop), Err(Error::Config(_))));
        let dice = LossConfig::new(DistanceKind::Dice, false);
        assert!(matches!(train(&mut net, &[], &[], &dice, &TrainConfig::default(), &mut noop), Err(Error::Data(_))));
        let bad = TrainConfig {
            epochs: 0,
            batch_size: 0,
            ..TrainConfig::default()
        };
        match train(&mut net, &items, &[], &dice, &bad, &mut noop) {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("unexpected {:?}", other.err()),
        }
    }
}
