use std::fmt;

use super::{LayerKind, NetError, NetworkSpec};
use crate::ops::{conv2d_output_dims, pool_output_dims, Conv2dConfig};

/// Per-example feature-map shape `(channels, height, width)`; flat vectors
/// are `(len, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    pub input: Shape,
    /// Output shape of every layer, in network order.
    pub layers: Vec<(String, Shape)>,
}

impl ShapeTrace {
    pub fn output(&self) -> Shape {
        self.layers.last().map_or(self.input, |l| l.1)
    }

    pub fn get(&self, name: &str) -> Option<Shape> {
        self.layers.iter().find(|l| l.0 == name).map(|l| l.1)
    }

    /// Input shape of the layer at `index`.
    pub fn input_of(&self, index: usize) -> Shape {
        if index == 0 {
            self.input
        } else {
            self.layers[index - 1].1
        }
    }
}

pub fn propagate_shapes(spec: &NetworkSpec) -> Result<ShapeTrace, NetError> {
    let input = Shape::new(1, 1, spec.i_len);
    let mut cur = input;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let fail = |e: crate::TensorError| NetError::Shape {
            layer: layer.name.clone(),
            reason: e.to_string(),
        };
        cur = match layer.kind {
            LayerKind::Conv {
                filters,
                kernel,
                stride,
                padding,
            } => {
                let (h, w) = conv2d_output_dims((cur.h, cur.w), kernel, Conv2dConfig { stride, padding }).map_err(fail)?;
                Shape::new(filters, h, w)
            }
            LayerKind::BatchNorm | LayerKind::Relu | LayerKind::Dropout { .. } | LayerKind::Softmax => cur,
            LayerKind::MaxPool { kernel, .. } => {
                let (h, w) = pool_output_dims("maxpool", (cur.h, cur.w), kernel).map_err(fail)?;
                Shape::new(cur.c, h, w)
            }
            LayerKind::AvgPool { kernel, .. } => {
                let (h, w) = pool_output_dims("avgpool", (cur.h, cur.w), kernel).map_err(fail)?;
                Shape::new(cur.c, h, w)
            }
            LayerKind::SwapAxes => Shape::new(cur.h, cur.c, cur.w),
            LayerKind::Flatten => Shape::new(cur.numel(), 1, 1),
            LayerKind::Dense { units } => Shape::new(units, 1, 1),
        };
        if cur.numel() == 0 {
            return Err(NetError::Shape {
                layer: layer.name.clone(),
                reason: format!("empty output {cur}"),
            });
        }
        layers.push((layer.name.clone(), cur));
    }
    Ok(ShapeTrace { input, layers })
}
