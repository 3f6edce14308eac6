//! ACDNet-family network descriptions.
//!
//! A [`NetworkSpec`] is a flat, ordered list of layers plus the four numbers
//! the architecture is derived from (`i_len`, `sr`, `n_cls`, `x`). Specs are
//! immutable values: every transform returns a new spec.

mod build;
mod cost;
mod rewire;
mod shapes;
mod text;

pub use build::{build_acdnet, build_with_filters, micro_acdnet, sfeb_pool_size, tfeb_pool_sizes, MICRO_FILTERS, TFEB_POOLS};
pub use cost::{count_filters, count_flops, count_params, cost_report, CostReport};
pub use rewire::{refit_pools, rewire_after_channel_removal};
pub use shapes::{propagate_shapes, Shape, ShapeTrace};
pub use text::parse_spec;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("layer `{layer}`: {reason}")]
    Shape { layer: String, reason: String },
    #[error("layer `{layer}` is not a convolution")]
    NotConv { layer: String },
    #[error("no layer named `{0}`")]
    UnknownLayer(String),
    #[error("cannot remove the last channel of `{layer}`")]
    LastChannel { layer: String },
    #[error("channel {channel} out of range for `{layer}` with {filters} filters")]
    ChannelRange {
        layer: String,
        channel: usize,
        filters: usize,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Where a pooling layer sits: the single SFEB pool or TFEB pool `1..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolStage {
    Sfeb,
    Tfeb(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    },
    BatchNorm,
    Relu,
    MaxPool {
        kernel: (usize, usize),
        stage: PoolStage,
    },
    AvgPool {
        kernel: (usize, usize),
        stage: PoolStage,
    },
    SwapAxes,
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        units: usize,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    pub fn conv_filters(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Conv { filters, .. } => Some(filters),
            _ => None,
        }
    }

    pub fn pool_stage(&self) -> Option<PoolStage> {
        match self.kind {
            LayerKind::MaxPool { stage, .. } | LayerKind::AvgPool { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub i_len: usize,
    pub sr: usize,
    pub n_cls: usize,
    pub x: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Names of all convolution layers in network order.
    pub fn conv_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.conv_filters().is_some())
            .map(|l| l.name.as_str())
            .collect()
    }

    /// Layers that run at inference time (dropout is the identity there).
    pub fn inference_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| !matches!(l.kind, LayerKind::Dropout { .. }))
    }

    /// Serializes to the line-oriented text form read by [`parse_spec`].
    pub fn to_text(&self) -> String {
        text::write_spec(self)
    }
}
