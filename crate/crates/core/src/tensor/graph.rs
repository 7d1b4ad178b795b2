use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::conv::{conv2d_backward, conv_transpose2d_backward};
use super::{conv2d, conv_transpose2d, maxpool2d, Real, Rng, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Elu => {
                if y > T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            }
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    CrossEntropy,
    Dice,
}

/// Operation kinds, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Input,
    Parameter,
    Conv2d,
    ConvTranspose2d,
    MaxPool2d,
    Elu,
    Relu,
    Sigmoid,
    Softmax,
    GaussianDropout,
    Concat,
    Sum,
    CrossEntropyDistance,
    DiceDistance,
    WeightedSum,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Input => "input",
            OpKind::Parameter => "parameter",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "transposed_conv2d",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::Elu => "elu",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax_channels",
            OpKind::GaussianDropout => "gaussian_dropout",
            OpKind::Concat => "concat_channels",
            OpKind::Sum => "sum",
            OpKind::CrossEntropyDistance => "distance_cross_entropy",
            OpKind::DiceDistance => "distance_dice",
            OpKind::WeightedSum => "weighted_sum",
        };
        f.write_str(name)
    }
}

/// Named trainable tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Activation {
        x: NodeId,
        kind: Activation,
    },
    Softmax {
        x: NodeId,
    },
    GaussianDropout {
        x: NodeId,
        multiplier: Vec<T>,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        x: NodeId,
    },
    ClassDistance {
        p: NodeId,
        target: Arc<Tensor<T>>,
        channel: usize,
        kind: DistanceKind,
    },
    WeightedSum {
        terms: Vec<(NodeId, T)>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Parameter,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Activation { kind, .. } => match kind {
                Activation::Elu => OpKind::Elu,
                Activation::Relu => OpKind::Relu,
                Activation::Sigmoid => OpKind::Sigmoid,
            },
            Op::Softmax { .. } => OpKind::Softmax,
            Op::GaussianDropout { .. } => OpKind::GaussianDropout,
            Op::Concat { .. } => OpKind::Concat,
            Op::Sum { .. } => OpKind::Sum,
            Op::ClassDistance { kind, .. } => match kind {
                DistanceKind::CrossEntropy => OpKind::CrossEntropyDistance,
                DistanceKind::Dice => OpKind::DiceDistance,
            },
            Op::WeightedSum { .. } => OpKind::WeightedSum,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b } => vec![*x, *w, *b],
            Op::MaxPool2d { x, .. }
            | Op::Activation { x, .. }
            | Op::Softmax { x }
            | Op::GaussianDropout { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::Concat { a, b } => vec![*a, *b],
            Op::ClassDistance { p, .. } => vec![*p],
            Op::WeightedSum { terms } => terms.iter().map(|(id, _)| *id).collect(),
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    requires_grad: bool,
    label: Option<String>,
}

/// Parameter store plus a tape of operation records.
///
/// Each forward pass appends nodes in execution order, so every node's
/// inputs precede it. [`Graph::clear`] drops the tape and keeps parameters.
pub struct Graph<T> {
    params: Vec<Parameter<T>>,
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of tracked leaf tensors produced by [`Graph::backward`].
///
/// Parameter gradients are written into the graph's parameter buffers;
/// this holds the gradients of nodes created with [`Graph::variable`].
pub struct Gradients<T> {
    inputs: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.inputs.get(id.0).and_then(|g| g.as_ref())
    }
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *v;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn add_parameter(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn parameters(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn parameter(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn parameter_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    /// Test hook: scales every gradient produced by ops of `kind` by 1.5.
    pub fn inject_backward_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    /// Drops the tape; parameters and their gradients are kept.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_kind(&self, id: NodeId) -> Result<OpKind> {
        self.node(id).map(|n| n.op.kind())
    }

    /// Hash of every piecewise branch taken on the current tape: max-pool
    /// argmax positions, ReLU input signs, probability-clamp hits and the
    /// empty Dice case. Two tapes with equal signatures lie on the same
    /// smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::MaxPool2d { argmax, .. } => (i, argmax).hash(&mut h),
                Op::Activation {
                    x,
                    kind: Activation::Relu,
                } => {
                    i.hash(&mut h);
                    for v in self.nodes[x.0].value.iter().flat_map(|t| t.data()) {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::ClassDistance { p, target, channel, kind } => {
                    i.hash(&mut h);
                    let Some(pv) = &self.nodes[p.0].value else { continue };
                    let Ok((n, c, hh, w)) = pv.dims4() else { continue };
                    let (lo, hi) = prob_clamp::<T>();
                    let mut empty = true;
                    for_channel(n, c, hh * w, *channel, |k| {
                        let chi = target.data()[k];
                        empty &= chi == T::zero() && pv.data()[k] == T::zero();
                        if *kind == DistanceKind::CrossEntropy && chi != T::zero() {
                            (pv.data()[k] > lo && pv.data()[k] < hi).hash(&mut h);
                        }
                    });
                    empty.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Kinds of the ops that read each parameter on the current tape.
    pub fn parameter_consumers(&self) -> Vec<Vec<OpKind>> {
        let mut out = vec![Vec::new(); self.params.len()];
        for node in &self.nodes {
            for input in node.op.inputs() {
                if let Op::Param(pid) = self.nodes[input.0].op {
                    let kind = node.op.kind();
                    if !out[pid.0].contains(&kind) {
                        out[pid.0].push(kind);
                    }
                }
            }
        }
        out
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>> {
        self.nodes.get(id.0).ok_or_else(|| {
            Error::State(format!(
                "node {} is not on the tape (forward pass not cached)",
                id.0
            ))
        })
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        let node = self.node(id)?;
        match (&node.op, &node.value) {
            (Op::Param(pid), _) => Ok(&self.params[pid.0].value),
            (_, Some(v)) => Ok(v),
            (_, None) => Err(Error::State(format!("node {} has no cached value", id.0))),
        }
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Option<Tensor<T>>) -> NodeId {
        let requires_grad = match &op {
            Op::Param(_) => true,
            Op::Input => false,
            other => other.inputs().iter().any(|&i| self.requires_grad(i)),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            label: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn finish(&mut self, op: Op<T>, value: Tensor<T>) -> Result<NodeId> {
        value.ensure_finite(&op.kind().to_string())?;
        Ok(self.push(op, Some(value)))
    }

    /// Attaches a label used by shape traces.
    pub fn set_label(&mut self, id: NodeId, label: impl Into<String>) {
        if let Some(node) = self.nodes.get_mut(id.0) {
            node.label = Some(label.into());
        }
    }

    /// `(label, node)` for every labelled node on the tape, in order.
    pub fn labelled_nodes(&self) -> Vec<(String, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.label.as_ref().map(|l| (l.clone(), NodeId(i))))
            .collect()
    }

    /// `(label, shape)` for every labelled node on the tape, in order.
    pub fn labelled_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                n.label.as_ref().map(|l| {
                    (
                        l.clone(),
                        self.value(NodeId(i)).map(|v| v.shape().to_vec()).unwrap_or_default(),
                    )
                })
            })
            .collect()
    }

    /// Constant leaf; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, Some(value))
    }

    /// Leaf whose gradient is kept in the [`Gradients`] returned by backward.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.push(Op::Input, Some(value));
        self.nodes[id.0].requires_grad = true;
        id
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        assert!(id.0 < self.params.len(), "unknown parameter {}", id.0);
        self.push(Op::Param(id), None)
    }

    fn check_ids(&self, ids: &[NodeId]) -> Result<()> {
        for id in ids {
            self.node(*id)?;
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        self.check_ids(&[x, w, b])?;
        let y = conv2d(self.value(x)?, self.value(w)?, self.value(b)?, stride)?;
        self.finish(Op::Conv2d { x, w, b, stride }, y)
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_ids(&[x, w, b])?;
        let y = conv_transpose2d(self.value(x)?, self.value(w)?, self.value(b)?)?;
        self.finish(Op::ConvTranspose2d { x, w, b }, y)
    }

    pub fn maxpool2d(&mut self, x: NodeId, stride: usize) -> Result<NodeId> {
        let (y, argmax) = maxpool2d(self.value(x)?, stride)?;
        self.finish(Op::MaxPool2d { x, argmax }, y)
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        let y = self.value(x)?.map(|v| kind.apply(v));
        self.finish(Op::Activation { x, kind }, y)
    }

    /// Per-pixel softmax across the channel axis of an NCHW tensor.
    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x)?;
        let (n, c, h, w) = xv.dims4()?;
        if c < 2 {
            return Err(Error::dim(format!("softmax_channels needs >= 2 channels, got {c}")));
        }
        let plane = h * w;
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            let base = b * c * plane;
            for px in 0..plane {
                let mut max = T::neg_infinity();
                for ch in 0..c {
                    max = max.max(src[base + ch * plane + px]);
                }
                let mut total = T::zero();
                for ch in 0..c {
                    let e = (src[base + ch * plane + px] - max).exp();
                    out[base + ch * plane + px] = e;
                    total = total + e;
                }
                for ch in 0..c {
                    let v = &mut out[base + ch * plane + px];
                    *v = *v / total;
                }
            }
        }
        let y = Tensor::new(xv.shape().to_vec(), out)?;
        self.finish(Op::Softmax { x }, y)
    }

    /// Multiplicative Gaussian noise `x * (1 + sigma * z)`, `sigma = sqrt(d / (1 - d))`.
    ///
    /// With `rng == None` (inference) or `d == 0` this returns `x` unchanged.
    pub fn gaussian_dropout(&mut self, x: NodeId, d: f64, rng: Option<&mut Rng>) -> Result<NodeId> {
        let sigma = gaussian_dropout_sigma(d)?;
        self.check_ids(&[x])?;
        let rng = match rng {
            Some(r) if d > 0.0 => r,
            _ => return Ok(x),
        };
        let xv = self.value(x)?;
        let multiplier: Vec<T> = (0..xv.len())
            .map(|_| T::lit(1.0 + sigma * rng.normal()))
            .collect();
        let data: Vec<T> = xv.data().iter().zip(&multiplier).map(|(&a, &m)| a * m).collect();
        let y = Tensor::new(xv.shape().to_vec(), data)?;
        self.finish(Op::GaussianDropout { x, multiplier }, y)
    }

    /// Channel-axis concatenation, `a` first.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a)?;
        let bv = self.value(b)?;
        let (n, ca, h, w) = av.dims4()?;
        let (nb, cb, hb, wb) = bv.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::dim(format!(
                "concat_channels: {:?} and {:?} differ outside the channel axis",
                av.shape(),
                bv.shape()
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..n {
            data.extend_from_slice(&av.data()[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&bv.data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let y = Tensor::new(vec![n, ca + cb, h, w], data)?;
        self.finish(Op::Concat { a, b }, y)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x)?.sum();
        self.finish(Op::Sum { x }, Tensor::scalar(s))
    }

    /// Per-class distance between probability maps `p` and a stacked binary
    /// target of the same NCHW shape, summed over the whole batch.
    ///
    /// Cross entropy: `(1/c) * sum(chi * log p)` with `c = N*H*W` and `p`
    /// clamped to `[1e-7, 1 - 1e-7]`. Dice: `2 * sum(chi * p) / sum(chi + p)`,
    /// defined as 1 when both sums vanish.
    pub fn class_distance(
        &mut self,
        p: NodeId,
        target: Arc<Tensor<T>>,
        channel: usize,
        kind: DistanceKind,
    ) -> Result<NodeId> {
        let pv = self.value(p)?;
        if pv.shape() != target.shape() {
            return Err(Error::dim(format!(
                "distance: prediction {:?} vs target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let (n, c, h, w) = pv.dims4()?;
        if channel >= c {
            return Err(Error::dim(format!("distance: channel {channel} out of {c}")));
        }
        let d = match kind {
            DistanceKind::CrossEntropy => {
                let (lo, hi) = prob_clamp::<T>();
                let mut acc = T::zero();
                for_channel(n, c, h * w, channel, |i| {
                    let chi = target.data()[i];
                    if chi != T::zero() {
                        acc = acc + chi * pv.data()[i].max(lo).min(hi).ln();
                    }
                });
                acc / T::lit((n * h * w) as f64)
            }
            DistanceKind::Dice => {
                let (s_chi_p, s_chi, s_p) = dice_sums(pv, &target, channel)?;
                if s_chi == T::zero() && s_p == T::zero() {
                    T::one()
                } else {
                    T::lit(2.0) * s_chi_p / (s_chi + s_p)
                }
            }
        };
        self.finish(
            Op::ClassDistance {
                p,
                target,
                channel,
                kind,
            },
            Tensor::scalar(d),
        )
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, T)>) -> Result<NodeId> {
        let mut acc = T::zero();
        for &(id, w) in &terms {
            let v = self.value(id)?;
            if v.len() != 1 {
                return Err(Error::dim(format!(
                    "weighted_sum: term {} is not scalar ({:?})",
                    id.0,
                    v.shape()
                )));
            }
            acc = acc + w * v.data()[0];
        }
        self.finish(Op::WeightedSum { terms }, Tensor::scalar(acc))
    }

    /// Reverse-mode sweep from a scalar `loss` node.
    ///
    /// Parameter gradient buffers are overwritten (zeroed first); gradients of
    /// [`Graph::variable`] leaves are returned.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        let loss_shape = self.value(loss)?.shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {loss_shape:?}"
            )));
        }
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&loss_shape, T::one()));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let kind = self.nodes[i].op.kind();
            let mut contributions = self.backward_node(NodeId(i), &gy)?;
            if self.fault == Some(kind) {
                for (_, g) in &mut contributions {
                    for v in g.data_mut() {
                        *v = *v * T::lit(1.5);
                    }
                }
            }
            match self.nodes[i].op {
                Op::Param(pid) => {
                    let buf = &mut self.params[pid.0].grad;
                    for (a, v) in buf.data_mut().iter_mut().zip(gy.data()) {
                        *a = *a + *v;
                    }
                }
                Op::Input => grads[i] = Some(gy),
                _ => {}
            }
            for (id, g) in contributions {
                add_into(&mut grads[id.0], g);
            }
        }
        for p in &self.params {
            p.grad.ensure_finite(&format!("gradient of {}", p.name))?;
        }
        Ok(Gradients { inputs: grads })
    }

    fn backward_node(&self, id: NodeId, gy: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[id.0];
        let y = node.value.as_ref();
        let mut out = Vec::new();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, stride } => {
                let g = conv2d_backward(
                    self.value(*x)?,
                    self.value(*w)?,
                    self.value(*b)?,
                    *stride,
                    gy,
                    self.requires_grad(*x),
                )?;
                if let Some(dx) = g.dx {
                    out.push((*x, dx));
                }
                out.push((*w, g.dw));
                out.push((*b, g.db));
            }
            Op::ConvTranspose2d { x, w, b } => {
                let g = conv_transpose2d_backward(
                    self.value(*x)?,
                    self.value(*w)?,
                    self.value(*b)?,
                    gy,
                    self.requires_grad(*x),
                )?;
                if let Some(dx) = g.dx {
                    out.push((*x, dx));
                }
                out.push((*w, g.dw));
                out.push((*b, g.db));
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x)?.shape());
                let d = dx.data_mut();
                for (&idx, &g) in argmax.iter().zip(gy.data()) {
                    d[idx as usize] = d[idx as usize] + g;
                }
                out.push((*x, dx));
            }
            Op::Activation { x, kind } => {
                let y = y.expect("activation caches output");
                let data = y
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&yv, &g)| g * kind.derivative_from_output(yv))
                    .collect();
                out.push((*x, Tensor::new(y.shape().to_vec(), data)?));
            }
            Op::Softmax { x } => {
                let y = y.expect("softmax caches output");
                let (n, c, h, w) = y.dims4()?;
                let plane = h * w;
                let mut dx = vec![T::zero(); y.len()];
                for b in 0..n {
                    let base = b * c * plane;
                    for px in 0..plane {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let k = base + ch * plane + px;
                            dot = dot + gy.data()[k] * y.data()[k];
                        }
                        for ch in 0..c {
                            let k = base + ch * plane + px;
                            dx[k] = y.data()[k] * (gy.data()[k] - dot);
                        }
                    }
                }
                out.push((*x, Tensor::new(y.shape().to_vec(), dx)?));
            }
            Op::GaussianDropout { x, multiplier } => {
                let data = gy.data().iter().zip(multiplier).map(|(&g, &m)| g * m).collect();
                out.push((*x, Tensor::new(gy.shape().to_vec(), data)?));
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a)?.dims4()?;
                let cb = self.value(*b)?.shape()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for i in 0..n {
                    let base = i * (ca + cb) * plane;
                    da.extend_from_slice(&gy.data()[base..base + ca * plane]);
                    db.extend_from_slice(&gy.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                out.push((*a, Tensor::new(vec![n, ca, h, w], da)?));
                out.push((*b, Tensor::new(vec![n, cb, h, w], db)?));
            }
            Op::Sum { x } => {
                let shape = self.value(*x)?.shape().to_vec();
                out.push((*x, Tensor::full(&shape, gy.data()[0])));
            }
            Op::ClassDistance {
                p,
                target,
                channel,
                kind,
            } => {
                let pv = self.value(*p)?;
                let (n, c, h, w) = pv.dims4()?;
                let g = gy.data()[0];
                let mut dp = Tensor::zeros(pv.shape());
                let d = dp.data_mut();
                match kind {
                    DistanceKind::CrossEntropy => {
                        let (lo, hi) = prob_clamp::<T>();
                        let scale = g / T::lit((n * h * w) as f64);
                        for_channel(n, c, h * w, *channel, |i| {
                            let chi = target.data()[i];
                            let pi = pv.data()[i];
                            if chi != T::zero() && pi > lo && pi < hi {
                                d[i] = scale * chi / pi;
                            }
                        });
                    }
                    DistanceKind::Dice => {
                        let (s_chi_p, s_chi, s_p) = dice_sums(pv, target, *channel)?;
                        let two = T::lit(2.0);
                        if s_chi == T::zero() && s_p == T::zero() {
                            // smoothed form (2*S1 + 1) / (S2 + 1) at S1 = S2 = 0
                            for_channel(n, c, h * w, *channel, |i| {
                                d[i] = g * (two * target.data()[i] - T::one());
                            });
                        } else {
                            let s2 = s_chi + s_p;
                            let scale = g * two / (s2 * s2);
                            for_channel(n, c, h * w, *channel, |i| {
                                d[i] = scale * (target.data()[i] * s2 - s_chi_p);
                            });
                        }
                    }
                }
                out.push((*p, dp));
            }
            Op::WeightedSum { terms } => {
                let g = gy.data()[0];
                for &(tid, w) in terms {
                    out.push((tid, Tensor::scalar(g * w)));
                }
            }
        }
        out.retain(|(nid, _)| self.requires_grad(*nid));
        Ok(out)
    }
}

pub(crate) fn gaussian_dropout_sigma(d: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&d) {
        return Err(Error::Parameter(format!(
            "drop probability must lie in [0, 1), got {d}"
        )));
    }
    Ok((d / (1.0 - d)).sqrt())
}

fn prob_clamp<T: Real>() -> (T, T) {
    (T::lit(1e-7), T::one() - T::lit(1e-7))
}

fn for_channel(n: usize, c: usize, plane: usize, channel: usize, mut f: impl FnMut(usize)) {
    for b in 0..n {
        let base = (b * c + channel) * plane;
        for i in base..base + plane {
            f(i);
        }
    }
}

fn dice_sums<T: Real>(p: &Tensor<T>, target: &Tensor<T>, channel: usize) -> Result<(T, T, T)> {
    let (n, c, h, w) = p.dims4()?;
    let (mut s_chi_p, mut s_chi, mut s_p) = (T::zero(), T::zero(), T::zero());
    for_channel(n, c, h * w, channel, |i| {
        let chi = target.data()[i];
        let pi = p.data()[i];
        s_chi_p = s_chi_p + chi * pi;
        s_chi = s_chi + chi;
        s_p = s_p + pi;
    });
    Ok((s_chi_p, s_chi, s_p))
}
