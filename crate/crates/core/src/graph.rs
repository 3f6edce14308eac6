//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order; each node's output shape is
//! inferred (and its inputs validated) when it is added. [`ComputeGraph::forward`]
//! evaluates every node once and caches what the backward pass needs;
//! [`ComputeGraph::backward`] walks the nodes in exact reverse order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ops::{self, BatchNormCache, Conv2dConfig};
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("layer `{layer}`: {source}")]
    Op {
        layer: String,
        #[source]
        source: TensorError,
    },
    #[error("layer `{layer}` produced a non-finite value")]
    NonFinite { layer: String },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("node `{layer}` is not a scalar loss (shape {shape:?})")]
    NotScalar { layer: String, shape: Vec<usize> },
    #[error("leaf `{layer}` expects shape {expected:?}, got {found:?}")]
    LeafShape {
        layer: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Normalization statistics source for a batch-norm node.
#[derive(Debug, Clone)]
pub enum BatchNormMode<T: Real> {
    Train,
    Infer { running_mean: Tensor<T>, running_var: Tensor<T> },
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf { requires_grad: bool },
    Conv2d(Conv2dConfig),
    BatchNorm(BatchNormMode<T>),
    Relu,
    MaxPool((usize, usize)),
    AvgPool((usize, usize)),
    SwapAxes,
    Flatten,
    Dropout { rate: f64, seed: u64 },
    Dense,
    Softmax,
    Scale(T),
    Add,
    Sum,
    KlDiv,
    CrossEntropy,
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    label: String,
    needs_grad: bool,
}

#[derive(Debug, Clone)]
enum Cache<T: Real> {
    None,
    Argmax(Vec<usize>),
    BatchNorm(BatchNormCache<T>),
    Mask(Vec<T>),
}

#[derive(Debug, Clone)]
pub struct ComputeGraph<T: Real> {
    nodes: Vec<Node<T>>,
    values: Vec<Option<Tensor<T>>>,
    caches: Vec<Cache<T>>,
    evaluated: bool,
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<T: Real> Default for ComputeGraph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ComputeGraph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            caches: Vec::new(),
            evaluated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    /// Output of a node; leaves always have one, other nodes after `forward`.
    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.values[id.0].as_ref()
    }

    /// Batch statistics of a training-mode batch-norm node after `forward`.
    pub fn batchnorm_stats(&self, id: NodeId) -> Option<&BatchNormCache<T>> {
        match &self.caches[id.0] {
            Cache::BatchNorm(c) => Some(c),
            _ => None,
        }
    }

    /// Hash of every piecewise branch taken in the last forward pass: ReLU
    /// input signs and max-pool argmax positions. Two evaluations with equal
    /// signatures lie on the same smooth piece of the network function.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (idx, node) in self.nodes.iter().enumerate() {
            match (&node.op, &self.caches[idx]) {
                (Op::Relu, _) => {
                    if let Some(x) = self.values[node.inputs[0].0].as_ref() {
                        for v in x.data() {
                            mix(u64::from(*v > T::zero()));
                        }
                    }
                }
                (Op::MaxPool(_), Cache::Argmax(arg)) => arg.iter().for_each(|&a| mix(a as u64)),
                _ => {}
            }
        }
        h
    }

    fn push(&mut self, label: &str, op: Op<T>, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let needs_grad = match op {
            Op::Leaf { requires_grad } => requires_grad,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            label: label.to_string(),
            needs_grad,
        });
        self.values.push(None);
        self.caches.push(Cache::None);
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    fn err(label: &str) -> impl FnOnce(TensorError) -> GraphError + '_ {
        move |source| GraphError::Op {
            layer: label.to_string(),
            source,
        }
    }

    /// A constant input (no gradient requested unless `requires_grad`).
    pub fn leaf(&mut self, label: &str, value: Tensor<T>, requires_grad: bool) -> NodeId {
        let shape = value.shape().to_vec();
        let id = self.push(label, Op::Leaf { requires_grad }, vec![], shape);
        self.values[id.0] = Some(value);
        id
    }

    pub fn input(&mut self, label: &str, value: Tensor<T>) -> NodeId {
        self.leaf(label, value, false)
    }

    pub fn param(&mut self, label: &str, value: Tensor<T>) -> NodeId {
        self.leaf(label, value, true)
    }

    /// Replaces a leaf's value; the shape must not change.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor<T>) -> Result<(), GraphError> {
        let node = &self.nodes[id.0];
        if !matches!(node.op, Op::Leaf { .. }) || node.shape != value.shape() {
            return Err(GraphError::LeafShape {
                layer: node.label.clone(),
                expected: node.shape.clone(),
                found: value.shape().to_vec(),
            });
        }
        self.values[id.0] = Some(value);
        self.evaluated = false;
        Ok(())
    }

    fn dims4(&self, label: &str, id: NodeId) -> Result<[usize; 4], GraphError> {
        let s = self.shape(id);
        s.try_into().map_err(|_| GraphError::Op {
            layer: label.to_string(),
            source: TensorError::Rank {
                op: "graph",
                expected: 4,
                found: s.to_vec(),
            },
        })
    }

    fn dims2(&self, label: &str, id: NodeId) -> Result<[usize; 2], GraphError> {
        let s = self.shape(id);
        s.try_into().map_err(|_| GraphError::Op {
            layer: label.to_string(),
            source: TensorError::Rank {
                op: "graph",
                expected: 2,
                found: s.to_vec(),
            },
        })
    }

    fn mismatch(label: &str, op: &'static str, what: &str, expected: usize, found: usize) -> GraphError {
        GraphError::Op {
            layer: label.to_string(),
            source: TensorError::ShapeMismatch {
                op,
                what: what.to_string(),
                expected,
                found,
            },
        }
    }

    pub fn conv2d(
        &mut self,
        label: &str,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        cfg: Conv2dConfig,
    ) -> Result<NodeId, GraphError> {
        let [n, c, h, w] = self.dims4(label, x)?;
        let [f, wc, kh, kw] = self.dims4(label, weight)?;
        if wc != c {
            return Err(Self::mismatch(label, "conv2d", "input channels", wc, c));
        }
        if self.shape(bias) != [f] {
            return Err(Self::mismatch(label, "conv2d", "bias length", f, self.shape(bias)[0]));
        }
        let (oh, ow) = ops::conv2d_output_dims((h, w), (kh, kw), cfg).map_err(Self::err(label))?;
        Ok(self.push(label, Op::Conv2d(cfg), vec![x, weight, bias], vec![n, f, oh, ow]))
    }

    pub fn batchnorm(
        &mut self,
        label: &str,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode<T>,
    ) -> Result<NodeId, GraphError> {
        let [_, c, _, _] = self.dims4(label, x)?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Self::mismatch(label, "batchnorm", "channels", c, self.shape(p)[0]));
            }
        }
        if let BatchNormMode::Infer { running_mean, running_var } = &mode {
            if running_mean.shape() != [c] || running_var.shape() != [c] {
                return Err(Self::mismatch(label, "batchnorm", "running statistics", c, running_mean.len()));
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(label, Op::BatchNorm(mode), vec![x, gamma, beta], shape))
    }

    pub fn relu(&mut self, label: &str, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(label, Op::Relu, vec![x], shape)
    }

    pub fn maxpool(&mut self, label: &str, x: NodeId, kernel: (usize, usize)) -> Result<NodeId, GraphError> {
        let [n, c, h, w] = self.dims4(label, x)?;
        let (oh, ow) = ops::pool_output_dims("maxpool", (h, w), kernel).map_err(Self::err(label))?;
        Ok(self.push(label, Op::MaxPool(kernel), vec![x], vec![n, c, oh, ow]))
    }

    pub fn avgpool(&mut self, label: &str, x: NodeId, kernel: (usize, usize)) -> Result<NodeId, GraphError> {
        let [n, c, h, w] = self.dims4(label, x)?;
        let (oh, ow) = ops::pool_output_dims("avgpool", (h, w), kernel).map_err(Self::err(label))?;
        Ok(self.push(label, Op::AvgPool(kernel), vec![x], vec![n, c, oh, ow]))
    }

    pub fn swap_axes(&mut self, label: &str, x: NodeId) -> Result<NodeId, GraphError> {
        let [n, c, h, w] = self.dims4(label, x)?;
        Ok(self.push(label, Op::SwapAxes, vec![x], vec![n, h, c, w]))
    }

    pub fn flatten(&mut self, label: &str, x: NodeId) -> Result<NodeId, GraphError> {
        let shape = ops::unflatten_dims(self.shape(x)).map_err(Self::err(label))?;
        Ok(self.push(label, Op::Flatten, vec![x], shape.to_vec()))
    }

    /// Inverted dropout; the mask is drawn from `seed` on every forward pass.
    pub fn dropout(&mut self, label: &str, x: NodeId, rate: f64, seed: u64) -> Result<NodeId, GraphError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GraphError::Op {
                layer: label.to_string(),
                source: TensorError::Invalid {
                    op: "dropout",
                    reason: format!("rate {rate} outside [0, 1)"),
                },
            });
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(label, Op::Dropout { rate, seed }, vec![x], shape))
    }

    pub fn dense(&mut self, label: &str, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, GraphError> {
        let [n, din] = self.dims2(label, x)?;
        let [dout, wdin] = self.dims2(label, weight)?;
        if wdin != din {
            return Err(Self::mismatch(label, "dense", "input features", wdin, din));
        }
        if self.shape(bias) != [dout] {
            return Err(Self::mismatch(label, "dense", "bias length", dout, self.shape(bias)[0]));
        }
        Ok(self.push(label, Op::Dense, vec![x, weight, bias], vec![n, dout]))
    }

    pub fn softmax(&mut self, label: &str, x: NodeId) -> Result<NodeId, GraphError> {
        self.dims2(label, x)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(label, Op::Softmax, vec![x], shape))
    }

    pub fn scale(&mut self, label: &str, x: NodeId, factor: T) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(label, Op::Scale(factor), vec![x], shape)
    }

    pub fn add(&mut self, label: &str, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch(label, "add", "element count", self.shape(a).iter().product(), self.shape(b).iter().product()));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(label, Op::Add, vec![a, b], shape))
    }

    pub fn sum(&mut self, label: &str, x: NodeId) -> NodeId {
        self.push(label, Op::Sum, vec![x], vec![1])
    }

    fn loss_node(&mut self, label: &str, op: Op<T>, pred: NodeId, target: NodeId) -> Result<NodeId, GraphError> {
        self.dims2(label, pred)?;
        if self.shape(pred) != self.shape(target) {
            let (a, b) = (self.shape(pred)[1], self.shape(target).last().copied().unwrap_or(0));
            return Err(Self::mismatch(label, "loss", "classes", a, b));
        }
        Ok(self.push(label, op, vec![pred, target], vec![1]))
    }

    /// Batch-mean KL divergence of `target` from `pred` (both probabilities).
    pub fn kl_div(&mut self, label: &str, pred: NodeId, target: NodeId) -> Result<NodeId, GraphError> {
        self.loss_node(label, Op::KlDiv, pred, target)
    }

    pub fn cross_entropy(&mut self, label: &str, pred: NodeId, target: NodeId) -> Result<NodeId, GraphError> {
        self.loss_node(label, Op::CrossEntropy, pred, target)
    }

    /// Evaluates every node in insertion order.
    pub fn forward(&mut self) -> Result<(), GraphError> {
        for idx in 0..self.nodes.len() {
            if matches!(self.nodes[idx].op, Op::Leaf { .. }) {
                continue;
            }
            let (value, cache) = self.eval(idx)?;
            if !value.is_finite() {
                return Err(GraphError::NonFinite {
                    layer: self.nodes[idx].label.clone(),
                });
            }
            self.values[idx] = Some(value);
            self.caches[idx] = cache;
        }
        self.evaluated = true;
        Ok(())
    }

    fn input_value(&self, idx: usize, k: usize) -> &Tensor<T> {
        self.values[self.nodes[idx].inputs[k].0]
            .as_ref()
            .expect("inputs are evaluated before their consumers")
    }

    fn eval(&self, idx: usize) -> Result<(Tensor<T>, Cache<T>), GraphError> {
        let node = &self.nodes[idx];
        let label = node.label.as_str();
        let x = || self.input_value(idx, 0);
        let e = Self::err(label);
        let eps = T::lit(ops::BN_EPS);
        Ok(match &node.op {
            Op::Leaf { .. } => unreachable!("leaves are never evaluated"),
            Op::Conv2d(cfg) => {
                let y = ops::conv2d(x(), self.input_value(idx, 1), self.input_value(idx, 2), *cfg).map_err(e)?;
                (y, Cache::None)
            }
            Op::BatchNorm(BatchNormMode::Train) => {
                let (y, c) = ops::batchnorm_train(x(), self.input_value(idx, 1), self.input_value(idx, 2), eps).map_err(e)?;
                (y, Cache::BatchNorm(c))
            }
            Op::BatchNorm(BatchNormMode::Infer { running_mean, running_var }) => {
                let y = ops::batchnorm_infer(x(), self.input_value(idx, 1), self.input_value(idx, 2), running_mean, running_var, eps)
                    .map_err(e)?;
                (y, Cache::None)
            }
            Op::Relu => (ops::relu(x()), Cache::None),
            Op::MaxPool(k) => {
                let (y, arg) = ops::maxpool(x(), *k).map_err(e)?;
                (y, Cache::Argmax(arg))
            }
            Op::AvgPool(k) => (ops::avgpool(x(), *k).map_err(e)?, Cache::None),
            Op::SwapAxes => (ops::swap_channel_height(x()).map_err(e)?, Cache::None),
            Op::Flatten => (x().clone().reshape(&node.shape).map_err(e)?, Cache::None),
            Op::Dropout { rate, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let keep = T::one() / (T::one() - T::lit(*rate));
                let mask: Vec<T> = (0..x().len())
                    .map(|_| if rng.random::<f64>() < *rate { T::zero() } else { keep })
                    .collect();
                let data = x().data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                (Tensor::new(&node.shape, data).map_err(e)?, Cache::Mask(mask))
            }
            Op::Dense => (
                ops::dense(x(), self.input_value(idx, 1), self.input_value(idx, 2)).map_err(e)?,
                Cache::None,
            ),
            Op::Softmax => (ops::softmax(x()).map_err(e)?, Cache::None),
            Op::Scale(f) => (x().map(|v| v * *f), Cache::None),
            Op::Add => {
                let mut y = x().clone();
                y.axpy(T::one(), self.input_value(idx, 1)).map_err(e)?;
                (y, Cache::None)
            }
            Op::Sum => (Tensor::scalar(x().sum()), Cache::None),
            Op::KlDiv => (
                Tensor::scalar(ops::kl_div_loss(x(), self.input_value(idx, 1)).map_err(e)?),
                Cache::None,
            ),
            Op::CrossEntropy => (
                Tensor::scalar(ops::cross_entropy_loss(x(), self.input_value(idx, 1)).map_err(e)?),
                Cache::None,
            ),
        })
    }

    /// Reverse-mode pass from a scalar node. Every node on a path from a
    /// gradient-requiring leaf receives its gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, GraphError> {
        if !self.evaluated {
            return Err(GraphError::BackwardBeforeForward);
        }
        if self.shape(loss) != [1] {
            return Err(GraphError::NotScalar {
                layer: self.label(loss).to_string(),
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            for (k, gin) in self.input_grads(idx, &g)?.into_iter().enumerate() {
                let target = node.inputs[k].0;
                let Some(gin) = gin else { continue };
                if !self.nodes[target].needs_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(acc) => acc.axpy(T::one(), &gin).map_err(Self::err(&node.label))?,
                    slot @ None => *slot = Some(gin),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>, GraphError> {
        let node = &self.nodes[idx];
        let e = Self::err(&node.label);
        let x = || self.input_value(idx, 0);
        let out = || self.values[idx].as_ref().expect("evaluated");
        let eps = T::lit(ops::BN_EPS);
        Ok(match &node.op {
            Op::Leaf { .. } => vec![],
            Op::Conv2d(cfg) => {
                let gr = ops::conv2d_backward(x(), self.input_value(idx, 1), *cfg, g).map_err(e)?;
                vec![Some(gr.input), Some(gr.weight), Some(gr.bias)]
            }
            Op::BatchNorm(BatchNormMode::Train) => {
                let Cache::BatchNorm(cache) = &self.caches[idx] else {
                    unreachable!("train-mode batchnorm caches statistics")
                };
                let gr = ops::batchnorm_train_backward(cache, self.input_value(idx, 1), g).map_err(e)?;
                vec![Some(gr.input), Some(gr.gamma), Some(gr.beta)]
            }
            Op::BatchNorm(BatchNormMode::Infer { running_mean, running_var }) => {
                let gr = ops::batchnorm_infer_backward(x(), self.input_value(idx, 1), running_mean, running_var, eps, g)
                    .map_err(e)?;
                vec![Some(gr.input), Some(gr.gamma), Some(gr.beta)]
            }
            Op::Relu => vec![Some(ops::relu_backward(x(), g).map_err(e)?)],
            Op::MaxPool(_) => {
                let Cache::Argmax(arg) = &self.caches[idx] else {
                    unreachable!("maxpool caches argmax")
                };
                vec![Some(ops::maxpool_backward(x().shape(), arg, g).map_err(e)?)]
            }
            Op::AvgPool(k) => vec![Some(ops::avgpool_backward(x().shape(), *k, g).map_err(e)?)],
            Op::SwapAxes => vec![Some(ops::swap_channel_height(g).map_err(e)?)],
            Op::Flatten => vec![Some(g.clone().reshape(x().shape()).map_err(e)?)],
            Op::Dropout { .. } => {
                let Cache::Mask(mask) = &self.caches[idx] else {
                    unreachable!("dropout caches its mask")
                };
                let data = g.data().iter().zip(mask).map(|(&v, &m)| v * m).collect();
                vec![Some(Tensor::new(g.shape(), data).map_err(e)?)]
            }
            Op::Dense => {
                let gr = ops::dense_backward(x(), self.input_value(idx, 1), g).map_err(e)?;
                vec![Some(gr.input), Some(gr.weight), Some(gr.bias)]
            }
            Op::Softmax => vec![Some(ops::softmax_backward(out(), g).map_err(e)?)],
            Op::Scale(f) => vec![Some(g.map(|v| v * *f))],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sum => vec![Some(Tensor::full(x().shape(), g.data()[0]))],
            Op::KlDiv => vec![
                Some(ops::kl_div_loss_backward(x(), self.input_value(idx, 1), g.data()[0]).map_err(e)?),
                None,
            ],
            Op::CrossEntropy => vec![
                Some(ops::cross_entropy_loss_backward(x(), self.input_value(idx, 1), g.data()[0]).map_err(e)?),
                None,
            ],
        })
    }
}
