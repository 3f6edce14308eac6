//! Inference schedule: the network's layers minus dropout, with batch-norm
//! and the ReLU after it folded into the preceding conv.

use crate::net::{LayerKind, NetworkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Conv {
        stride: (usize, usize),
        padding: (usize, usize),
        /// Output clamped at real zero.
        relu: bool,
    },
    /// Absorbed into the preceding conv; no computation.
    Folded,
    MaxPool {
        kernel: (usize, usize),
    },
    AvgPool {
        kernel: (usize, usize),
    },
    SwapAxes,
    Flatten,
    Dense,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub op: Op,
    /// Activation params of the input.
    pub input_act: String,
    /// Activation params of the output.
    pub act: String,
    /// The float output of this layer fixes the range of `act`.
    pub records_range: bool,
}

pub fn schedule(spec: &NetworkSpec) -> Vec<Entry> {
    let layers: Vec<_> = spec.layers.iter().filter(|l| !matches!(l.kind, LayerKind::Dropout { .. })).collect();
    let mut out: Vec<Entry> = Vec::with_capacity(layers.len());
    let mut cur = "input".to_string();
    let mut i = 0;
    while i < layers.len() {
        let l = layers[i];
        match l.kind {
            LayerKind::Conv { .. } | LayerKind::Dense { .. } => {
                let mut j = i + 1;
                while j < layers.len() && layers[j].kind == LayerKind::BatchNorm {
                    j += 1;
                }
                let relu = j < layers.len() && layers[j].kind == LayerKind::Relu;
                let end = if relu { j } else { j - 1 };
                let op = match l.kind {
                    LayerKind::Conv { stride, padding, .. } => Op::Conv { stride, padding, relu },
                    _ => Op::Dense,
                };
                let act = l.name.clone();
                for (k, layer) in layers.iter().enumerate().take(end + 1).skip(i) {
                    out.push(Entry {
                        name: layer.name.clone(),
                        op: if k == i { op } else { Op::Folded },
                        input_act: if k == i { cur.clone() } else { act.clone() },
                        act: act.clone(),
                        records_range: k == end,
                    });
                }
                cur = act;
                i = end + 1;
                continue;
            }
            LayerKind::BatchNorm | LayerKind::Relu => {
                // ReLU outside a conv block keeps values in range already
                // clamped by the producer; batch-norm without a conv cannot fold
                out.push(Entry {
                    name: l.name.clone(),
                    op: Op::Folded,
                    input_act: cur.clone(),
                    act: cur.clone(),
                    records_range: false,
                });
            }
            _ => {
                let op = match l.kind {
                    LayerKind::MaxPool { kernel, .. } => Op::MaxPool { kernel },
                    LayerKind::AvgPool { kernel, .. } => Op::AvgPool { kernel },
                    LayerKind::SwapAxes => Op::SwapAxes,
                    LayerKind::Flatten => Op::Flatten,
                    _ => Op::Softmax,
                };
                out.push(Entry {
                    name: l.name.clone(),
                    op,
                    input_act: cur.clone(),
                    act: cur.clone(),
                    records_range: false,
                });
            }
        }
        i += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_acdnet, micro_acdnet};

    #[test]
    fn drops_only_dropout() {
        for spec in [micro_acdnet(), build_acdnet(2000, 2000, 4, 1).unwrap()] {
            let s = schedule(&spec);
            let dropouts = spec.layers.iter().filter(|l| matches!(l.kind, LayerKind::Dropout { .. })).count();
            assert_eq!(dropouts, 1);
            assert_eq!(s.len(), spec.layers.len() - dropouts);
        }
    }

    #[test]
    fn conv_blocks_fold_and_fuse_relu() {
        let s = schedule(&micro_acdnet());
        assert_eq!(s[0].name, "conv1");
        assert!(matches!(s[0].op, Op::Conv { relu: true, .. }));
        assert_eq!(s[0].input_act, "input");
        assert_eq!((s[1].op, s[2].op), (Op::Folded, Op::Folded));
        assert!(s[2].records_range && !s[0].records_range);
        assert_eq!(s[3].input_act, "conv1");
        let dense = s.iter().find(|e| e.op == Op::Dense).unwrap();
        assert_eq!(dense.input_act, "conv12");
        assert!(dense.records_range);
        let pool = s.iter().find(|e| e.name == "maxpool1").unwrap();
        assert_eq!(pool.act, "conv2");
    }
}
