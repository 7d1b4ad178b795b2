//! Class-weighted objectives, ADAM and the training loop.

mod adam;
mod run;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Encoding;
use crate::error::{Error, Result};
use crate::model::{Head, Mode, Network};
use crate::tensor::{gradcheck, DistanceKind, GradcheckOptions, GradcheckReport, Graph, NodeId, Real, Rng, Tensor};

pub use adam::{AdamConfig, AdamState};
pub use run::{
    prepare_items, train, EpochEvent, EpochRecord, StopReason, TrainConfig, TrainHistory, TrainItem, TrainOutcome,
    HISTORY_HEADER,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub distance: DistanceKind,
    /// Scale each class term by its inverse batch pixel fraction.
    pub weighted: bool,
}

impl Default for LossConfig {
    /// Class-weighted Dice.
    fn default() -> Self {
        Self::new(DistanceKind::Dice, true)
    }
}

impl LossConfig {
    pub fn new(distance: DistanceKind, weighted: bool) -> Self {
        Self { distance, weighted }
    }

    /// The head a loss must be trained with.
    pub fn required_head(&self) -> Head {
        match self.distance {
            DistanceKind::Dice => Head::Sigmoid,
            DistanceKind::CrossEntropy => Head::Softmax,
        }
    }

    pub fn encoding(&self) -> Encoding {
        self.required_head().encoding()
    }

    /// Dice needs the sigmoid head, cross entropy the softmax head.
    pub fn check_pairing(&self, head: Head) -> Result<()> {
        if head == self.required_head() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "{:?} loss requires the {:?} head, got {:?}",
                self.distance,
                self.required_head(),
                head
            )))
        }
    }
}

/// Per-channel pixel fractions `r_l = c_l / c` of a `[N, C, H, W]` 0/1 target,
/// where `c = N * H * W`. An absent class counts as a single pixel.
pub fn class_weights<T: Real>(target: &Tensor<T>) -> Result<Vec<f64>> {
    let (n, c, h, w) = target.dims4()?;
    let plane = h * w;
    let total = (n * plane) as f64;
    let mut counts = vec![0.0f64; c];
    for b in 0..n {
        for (l, count) in counts.iter_mut().enumerate() {
            let start = (b * c + l) * plane;
            *count += target.data()[start..start + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(l, count)| {
            if count == 0.0 {
                log::warn!("class {l} is absent from the batch; weighting it as one pixel");
                1.0 / total
            } else {
                count / total
            }
        })
        .collect())
}

/// Records `-sum_l w_l * d_l` over every output channel, with `w_l = 1 / r_l`
/// when weighted and 1 otherwise.
pub fn build_loss<T: Real>(graph: &mut Graph<T>, output: NodeId, target: Arc<Tensor<T>>, config: &LossConfig) -> Result<NodeId> {
    let (_, c, _, _) = target.dims4()?;
    let weights = if config.weighted {
        class_weights(&target)?.into_iter().map(|r| 1.0 / r).collect()
    } else {
        vec![1.0; c]
    };
    let mut terms = Vec::with_capacity(c);
    for (l, w) in weights.into_iter().enumerate() {
        let d = graph.class_distance(output, Arc::clone(&target), l, config.distance)?;
        terms.push((d, T::lit(-w)));
    }
    graph.weighted_sum(terms)
}

/// Finite-difference check of the full network plus loss. With a
/// `dropout_seed` the forward pass runs in training mode with the same
/// dropout noise on every evaluation; otherwise in inference mode.
pub fn gradcheck_loss(
    net: &mut Network<f64>,
    batch: &Tensor<f64>,
    target: &Tensor<f64>,
    loss: &LossConfig,
    dropout_seed: Option<u64>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    loss.check_pairing(net.config().head)?;
    let target = Arc::new(target.clone());
    let mut g = std::mem::take(net.graph_mut());
    let report = gradcheck(
        &mut g,
        |g| {
            let mut rng = dropout_seed.map(Rng::new);
            let mode = match rng.as_mut() {
                Some(r) => Mode::Train(r),
                None => Mode::Infer,
            };
            let out = net.record_forward(g, batch, mode)?;
            build_loss(g, out, Arc::clone(&target), loss)
        },
        opts,
    );
    *net.graph_mut() = g;
    report
}
