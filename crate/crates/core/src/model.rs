//! Parameters of a [`NetworkSpec`] and its forward pass.
//!
//! Parameters are keyed `<layer>.<role>`: `conv3.weight`, `conv3.bias`,
//! `bn3.gamma`, `bn3.beta`, `bn3.running_mean`, `bn3.running_var`,
//! `dense1.weight`, `dense1.bias`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::{BatchNormMode, ComputeGraph, GraphError, NodeId};
use crate::init::{derive_seed, he_normal_init};
use crate::net::{propagate_shapes, rewire_after_channel_removal, LayerKind, LayerSpec, NetError, NetworkSpec};
use crate::ops::{self, Conv2dConfig};
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("layer `{layer}`: {source}")]
    Op {
        layer: String,
        #[source]
        source: TensorError,
    },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("input must be [N, 1, 1, {i_len}], got {found:?}")]
    Input { i_len: usize, found: Vec<usize> },
}

/// Shapes of every parameter tensor the spec needs, in layer order.
pub fn expected_shapes(spec: &NetworkSpec) -> Result<Vec<(String, Vec<usize>)>, NetError> {
    let trace = propagate_shapes(spec)?;
    let mut out = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let input = trace.input_of(i);
        let n = &layer.name;
        match layer.kind {
            LayerKind::Conv { filters, kernel, .. } => {
                out.push((format!("{n}.weight"), vec![filters, input.c, kernel.0, kernel.1]));
                out.push((format!("{n}.bias"), vec![filters]));
            }
            LayerKind::BatchNorm => {
                for role in ["gamma", "beta", "running_mean", "running_var"] {
                    out.push((format!("{n}.{role}"), vec![input.c]));
                }
            }
            LayerKind::Dense { units } => {
                out.push((format!("{n}.weight"), vec![units, input.numel()]));
                out.push((format!("{n}.bias"), vec![units]));
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Running statistics are state, not trainable parameters.
pub fn is_trainable(name: &str) -> bool {
    !name.ends_with(".running_mean") && !name.ends_with(".running_var")
}

/// Conv and dense weight matrices (the tensors sparsification acts on).
pub fn is_weight(name: &str) -> bool {
    name.ends_with(".weight")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self { tensors: BTreeMap::new() }
    }
}

impl<T: Real> Params<T> {
    /// He-normal weights (seeded per tensor name), zero biases, unit γ and
    /// running variance, zero β and running mean.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self, NetError> {
        let mut tensors = BTreeMap::new();
        for (name, shape) in expected_shapes(spec)? {
            let t = if is_weight(&name) {
                he_normal_init(&shape, derive_seed(seed, &name))
            } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                Tensor::ones(&shape)
            } else {
                Tensor::zeros(&shape)
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn map_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.tensors
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.iter().filter(|(n, _)| is_trainable(n)).map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that exactly the tensors the spec needs are present with the right shapes.
    pub fn check(&self, spec: &NetworkSpec) -> Result<(), ModelError> {
        let expected = expected_shapes(spec)?;
        for (name, shape) in &expected {
            let t = self.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.iter().any(|(n, _)| n == *k)) {
            return Err(ModelError::ParamShape {
                name: extra.clone(),
                expected: vec![],
                found: self.tensors[extra].shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// How the dense layer behind the last conv follows a removed channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DenseRewire {
    /// Fresh he-normal weights whenever its input width changes.
    Reinit,
    /// Drop the input columns fed by the removed channel.
    #[default]
    Slice,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Consumer {
    /// The next conv reads the channel through its input axis.
    Conv(String),
    /// The channel becomes a row of the TFEB input; no weights follow it.
    Height,
    /// Flattened into `dense` as `per_channel` consecutive features.
    Dense { name: String, per_channel: usize },
}

/// Tensor surgery for deleting one output channel of a conv layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelRemoval {
    pub conv: String,
    pub channel: usize,
    batchnorm: Option<String>,
    consumer: Consumer,
}

impl ChannelRemoval {
    pub fn plan(spec: &NetworkSpec, conv: &str, channel: usize) -> Result<Self, NetError> {
        let pos = spec.position(conv).ok_or_else(|| NetError::UnknownLayer(conv.to_string()))?;
        if spec.layers[pos].conv_filters().is_none() {
            return Err(NetError::NotConv { layer: conv.to_string() });
        }
        let trace = propagate_shapes(spec)?;
        let mut batchnorm = None;
        let mut consumer = None;
        for (i, l) in spec.layers.iter().enumerate().skip(pos + 1) {
            match l.kind {
                LayerKind::BatchNorm if batchnorm.is_none() && consumer.is_none() => batchnorm = Some(l.name.clone()),
                LayerKind::SwapAxes => {
                    consumer = Some(Consumer::Height);
                    break;
                }
                LayerKind::Conv { .. } => {
                    consumer = Some(Consumer::Conv(l.name.clone()));
                    break;
                }
                LayerKind::Dense { .. } => {
                    let input = trace.input_of(i);
                    let c = trace.layers[pos].1.c;
                    consumer = Some(Consumer::Dense {
                        name: l.name.clone(),
                        per_channel: input.numel() / c,
                    });
                    break;
                }
                _ => {}
            }
        }
        Ok(Self {
            conv: conv.to_string(),
            channel,
            batchnorm,
            consumer: consumer.unwrap_or(Consumer::Height),
        })
    }

    pub fn dense_consumer(&self) -> Option<&str> {
        match &self.consumer {
            Consumer::Dense { name, .. } => Some(name),
            _ => None,
        }
    }

    /// Slices every tensor in `map` that belongs to the affected layers.
    /// Works on parameters, optimizer velocities and sparsity masks alike.
    pub fn apply<T: Real>(&self, map: &mut BTreeMap<String, Tensor<T>>) {
        let ch = self.channel;
        let mut edit = |name: String, f: &dyn Fn(&Tensor<T>) -> Tensor<T>| {
            if let Some(t) = map.get_mut(&name) {
                *t = f(t);
            }
        };
        edit(format!("{}.weight", self.conv), &|t| t.remove_index(0, ch));
        edit(format!("{}.bias", self.conv), &|t| t.remove_index(0, ch));
        if let Some(bn) = &self.batchnorm {
            for role in ["gamma", "beta", "running_mean", "running_var"] {
                edit(format!("{bn}.{role}"), &|t| t.remove_index(0, ch));
            }
        }
        match &self.consumer {
            Consumer::Conv(next) => edit(format!("{next}.weight"), &|t| t.remove_index(1, ch)),
            Consumer::Height => {}
            Consumer::Dense { name, per_channel } => {
                let k = *per_channel;
                edit(format!("{name}.weight"), &|t| {
                    let keep: Vec<usize> = (0..t.shape()[1]).filter(|&j| j / k != ch).collect();
                    t.select(1, &keep)
                });
            }
        }
    }
}

/// Removes output channel `channel` of conv `conv` from both the spec and
/// the parameters. Returns the new spec, parameters and the removal record
/// (so callers can slice velocities and masks the same way).
pub fn prune_channel<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    conv: &str,
    channel: usize,
    dense: DenseRewire,
    seed: u64,
) -> Result<(NetworkSpec, Params<T>, ChannelRemoval), ModelError> {
    let next = rewire_after_channel_removal(spec, conv, channel)?;
    let removal = ChannelRemoval::plan(spec, conv, channel)?;
    let mut out = params.clone();
    removal.apply(out.map_mut());
    if dense == DenseRewire::Reinit {
        if let Some(d) = removal.dense_consumer() {
            let name = format!("{d}.weight");
            let shape = out.require(&name)?.shape().to_vec();
            let salt = format!("{name}/{}/{channel}/{}", removal.conv, shape[1]);
            out.insert(name, he_normal_init(&shape, derive_seed(seed, &salt)));
        }
    }
    out.check(&next)?;
    Ok((next, out, removal))
}

fn check_input<T: Real>(spec: &NetworkSpec, x: &Tensor<T>) -> Result<(), ModelError> {
    match *x.shape() {
        [_, 1, 1, l] if l == spec.i_len => Ok(()),
        _ => Err(ModelError::Input {
            i_len: spec.i_len,
            found: x.shape().to_vec(),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm, dropout active with this seed.
    Train { dropout_seed: u64 },
    /// Running statistics, no dropout.
    Infer,
}

/// A forward graph over one input batch.
pub struct Forward<T: Real> {
    pub graph: ComputeGraph<T>,
    pub input: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
    /// Graph leaf of each trainable parameter.
    pub params: BTreeMap<String, NodeId>,
    /// Post-activation output of each conv block, keyed by conv name.
    pub activations: BTreeMap<String, NodeId>,
    batchnorms: Vec<(String, NodeId)>,
}

impl<T: Real> Forward<T> {
    /// Folds the batch statistics of the last forward pass into the running statistics.
    pub fn update_running(&self, params: &mut Params<T>) -> Result<(), ModelError> {
        for (bn, id) in &self.batchnorms {
            if let Some(stats) = self.graph.batchnorm_stats(*id) {
                let mut mean = params.require(&format!("{bn}.running_mean"))?.clone();
                let mut var = params.require(&format!("{bn}.running_var"))?.clone();
                stats.update_running(mean.data_mut(), var.data_mut());
                params.insert(format!("{bn}.running_mean"), mean);
                params.insert(format!("{bn}.running_var"), var);
            }
        }
        Ok(())
    }
}

/// Builds (but does not run) the forward graph of `spec` on `input`
/// (`[N, 1, 1, i_len]`).
pub fn build_forward<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    input: Tensor<T>,
    mode: Mode,
) -> Result<Forward<T>, ModelError> {
    check_input(spec, &input)?;
    let mut g = ComputeGraph::new();
    let input_id = g.input("input", input);
    let mut cur = input_id;
    let mut param_ids = BTreeMap::new();
    let mut activations = BTreeMap::new();
    let mut batchnorms = Vec::new();
    let mut last_conv: Option<String> = None;
    let mut logits = None;

    let mut leaf = |g: &mut ComputeGraph<T>, name: String| -> Result<NodeId, ModelError> {
        let id = g.param(&name, params.require(&name)?.clone());
        param_ids.insert(name, id);
        Ok(id)
    };

    for layer in &spec.layers {
        let n = layer.name.as_str();
        cur = match layer.kind {
            LayerKind::Conv { stride, padding, .. } => {
                let w = leaf(&mut g, format!("{n}.weight"))?;
                let b = leaf(&mut g, format!("{n}.bias"))?;
                last_conv = Some(n.to_string());
                g.conv2d(n, cur, w, b, Conv2dConfig { stride, padding })?
            }
            LayerKind::BatchNorm => {
                let gamma = leaf(&mut g, format!("{n}.gamma"))?;
                let beta = leaf(&mut g, format!("{n}.beta"))?;
                let bn_mode = match mode {
                    Mode::Train { .. } => BatchNormMode::Train,
                    Mode::Infer => BatchNormMode::Infer {
                        running_mean: params.require(&format!("{n}.running_mean"))?.clone(),
                        running_var: params.require(&format!("{n}.running_var"))?.clone(),
                    },
                };
                let id = g.batchnorm(n, cur, gamma, beta, bn_mode)?;
                batchnorms.push((n.to_string(), id));
                id
            }
            LayerKind::Relu => {
                let id = g.relu(n, cur);
                if let Some(c) = last_conv.take() {
                    activations.insert(c, id);
                }
                id
            }
            LayerKind::MaxPool { kernel, .. } => g.maxpool(n, cur, kernel)?,
            LayerKind::AvgPool { kernel, .. } => g.avgpool(n, cur, kernel)?,
            LayerKind::SwapAxes => g.swap_axes(n, cur)?,
            LayerKind::Dropout { rate } => match mode {
                Mode::Train { dropout_seed } => g.dropout(n, cur, rate, derive_seed(dropout_seed, n))?,
                Mode::Infer => cur,
            },
            LayerKind::Flatten => g.flatten(n, cur)?,
            LayerKind::Dense { .. } => {
                let w = leaf(&mut g, format!("{n}.weight"))?;
                let b = leaf(&mut g, format!("{n}.bias"))?;
                let id = g.dense(n, cur, w, b)?;
                logits = Some(id);
                id
            }
            LayerKind::Softmax => {
                logits.get_or_insert(cur);
                g.softmax(n, cur)?
            }
        };
    }
    let logits = logits.unwrap_or(cur);
    Ok(Forward {
        graph: g,
        input: input_id,
        logits,
        probs: cur,
        params: param_ids,
        activations,
        batchnorms,
    })
}

/// Inference-mode forward pass straight through the kernels. `visit` sees
/// every layer's output (dropout is skipped). Returns the pre-softmax logits.
pub fn infer_with<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    x: &Tensor<T>,
    mut visit: impl FnMut(&LayerSpec, &Tensor<T>),
) -> Result<Tensor<T>, ModelError> {
    check_input(spec, x)?;
    let mut cur = x.clone();
    let mut logits = None;
    let eps = T::lit(ops::BN_EPS);
    for layer in spec.inference_layers() {
        let n = layer.name.as_str();
        let e = |source| ModelError::Op {
            layer: n.to_string(),
            source,
        };
        let p = |role: &str| params.require(&format!("{n}.{role}"));
        cur = match layer.kind {
            LayerKind::Conv { stride, padding, .. } => {
                ops::conv2d(&cur, p("weight")?, p("bias")?, Conv2dConfig { stride, padding }).map_err(e)?
            }
            LayerKind::BatchNorm => {
                ops::batchnorm_infer(&cur, p("gamma")?, p("beta")?, p("running_mean")?, p("running_var")?, eps).map_err(e)?
            }
            LayerKind::Relu => ops::relu(&cur),
            LayerKind::MaxPool { kernel, .. } => ops::maxpool(&cur, kernel).map_err(e)?.0,
            LayerKind::AvgPool { kernel, .. } => ops::avgpool(&cur, kernel).map_err(e)?,
            LayerKind::SwapAxes => ops::swap_channel_height(&cur).map_err(e)?,
            LayerKind::Dropout { .. } => cur,
            LayerKind::Flatten => {
                let dims = ops::unflatten_dims(cur.shape()).map_err(e)?;
                cur.reshape(&dims).map_err(e)?
            }
            LayerKind::Dense { .. } => {
                let y = ops::dense(&cur, p("weight")?, p("bias")?).map_err(e)?;
                logits = Some(y.clone());
                y
            }
            LayerKind::Softmax => {
                logits.get_or_insert_with(|| cur.clone());
                ops::softmax(&cur).map_err(e)?
            }
        };
        visit(layer, &cur);
    }
    Ok(logits.unwrap_or(cur))
}

/// Inference-mode logits.
pub fn infer<T: Real>(spec: &NetworkSpec, params: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    infer_with(spec, params, x, |_, _| {})
}

/// Inference-mode class probabilities.
pub fn predict<T: Real>(spec: &NetworkSpec, params: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let logits = infer(spec, params, x)?;
    ops::softmax(&logits).map_err(|source| ModelError::Op {
        layer: "softmax".into(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::build_acdnet;

    fn toy() -> NetworkSpec {
        build_acdnet(2000, 2000, 4, 1).unwrap()
    }

    #[test]
    fn init_matches_expected_shapes() {
        let spec = toy();
        let p: Params = Params::init(&spec, 1).unwrap();
        p.check(&spec).unwrap();
        assert_eq!(p.get("conv3.weight").unwrap().shape(), &[4, 1, 3, 3]);
        assert_eq!(p.get("dense1.weight").unwrap().shape(), &[4, 4]);
        assert!(p.get("bn5.running_var").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn graph_and_direct_inference_agree() {
        let spec = toy();
        let p: Params<f64> = Params::init(&spec, 3).unwrap();
        let x = Tensor::from_fn(&[2, 1, 1, 2000], |i| ((i as f64) * 0.37).sin());
        let direct = predict(&spec, &p, &x).unwrap();
        let mut f = build_forward(&spec, &p, x, Mode::Infer).unwrap();
        f.graph.forward().unwrap();
        let via_graph = f.graph.value(f.probs).unwrap();
        for (a, b) in direct.data().iter().zip(via_graph.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let spec = toy();
        let p: Params = Params::init(&spec, 3).unwrap();
        let x = Tensor::from_fn(&[3, 1, 1, 2000], |i| ((i as f32) * 0.11).cos());
        assert_eq!(predict(&spec, &p, &x).unwrap(), predict(&spec, &p, &x).unwrap());
    }

    #[test]
    fn rejects_wrong_input_length() {
        let spec = toy();
        let p: Params = Params::init(&spec, 3).unwrap();
        assert!(matches!(
            predict(&spec, &p, &Tensor::zeros(&[1, 1, 1, 1999])),
            Err(ModelError::Input { .. })
        ));
    }

    #[test]
    fn pruning_slices_owner_and_consumer() {
        let spec = build_acdnet(2000, 2000, 4, 2).unwrap();
        let p: Params<f64> = Params::init(&spec, 5).unwrap();
        let (s2, p2, _) = prune_channel(&spec, &p, "conv5", 3, DenseRewire::Reinit, 0).unwrap();
        p2.check(&s2).unwrap();
        let w5 = p.get("conv5.weight").unwrap();
        assert_eq!(p2.get("conv5.weight").unwrap(), &w5.remove_index(0, 3));
        assert_eq!(p2.get("conv6.weight").unwrap(), &p.get("conv6.weight").unwrap().remove_index(1, 3));
        assert_eq!(p2.get("bn5.gamma").unwrap().len(), 15);
        assert_eq!(p2.get("dense1.weight"), p.get("dense1.weight"));
    }

    #[test]
    fn pruning_conv2_leaves_conv3_weights() {
        let spec = build_acdnet(2000, 2000, 4, 2).unwrap();
        let p: Params<f64> = Params::init(&spec, 5).unwrap();
        let (s2, p2, _) = prune_channel(&spec, &p, "conv2", 0, DenseRewire::Reinit, 0).unwrap();
        p2.check(&s2).unwrap();
        assert_eq!(p2.get("conv3.weight"), p.get("conv3.weight"));
    }

    #[test]
    fn pruning_last_conv_rewires_dense() {
        let spec = build_acdnet(2000, 2000, 4, 2).unwrap();
        let p: Params<f64> = Params::init(&spec, 5).unwrap();
        let (_, sliced, _) = prune_channel(&spec, &p, "conv12", 1, DenseRewire::Slice, 0).unwrap();
        assert_eq!(sliced.get("dense1.weight").unwrap(), &p.get("dense1.weight").unwrap().remove_index(1, 1));
        let (s3, fresh, _) = prune_channel(&spec, &p, "conv12", 1, DenseRewire::Reinit, 0).unwrap();
        fresh.check(&s3).unwrap();
        assert_eq!(fresh.get("dense1.weight").unwrap().shape(), &[4, 3]);
        assert_ne!(fresh.get("dense1.weight"), sliced.get("dense1.weight"));
    }
}
