//! Activation working-memory planning over the inference schedule.
//!
//! Each compute step reads its input buffer and writes a fresh output
//! buffer; flatten is a view and softmax runs in place. A buffer is live
//! from the step that produces it through its last reader.

use thiserror::Error;

use super::schedule::{schedule, Op};
use crate::net::{propagate_shapes, LayerKind, NetError, NetworkSpec, PoolStage};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("cannot fuse `{conv}` with `{pool}`: {reason}")]
    UnsupportedFusion { conv: String, pool: String, reason: String },
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryMode {
    /// Every activation materialized whole.
    Naive,
    /// The SFEB pool consumes the conv before it through a sliding segment
    /// one pool window wide; the input stays resident until then.
    Fused,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Buffer {
    pub name: String,
    pub bytes: usize,
    /// Step that writes it; 0 for the input, which exists before step 1.
    pub first_use: usize,
    pub last_use: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fusion {
    pub conv: String,
    pub pool: String,
    /// Conv output columns held at once: one pool window.
    pub segment_cols: usize,
    /// Columns of the conv's own input that feed one segment.
    pub input_span: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryPlan {
    pub mode: MemoryMode,
    /// Step names; step `i` is `steps[i - 1]`.
    pub steps: Vec<String>,
    pub buffers: Vec<Buffer>,
    pub peak_bytes: usize,
    pub peak_step: usize,
    pub fusion: Option<Fusion>,
}

impl MemoryPlan {
    pub fn live_bytes(&self, step: usize) -> usize {
        self.buffers
            .iter()
            .filter(|b| b.first_use <= step && step <= b.last_use)
            .map(|b| b.bytes)
            .sum()
    }

    pub fn buffer(&self, name: &str) -> Option<&Buffer> {
        self.buffers.iter().find(|b| b.name == name)
    }
}

/// Naive plan, or the fused plan over the SFEB conv-pool pair.
pub fn plan_memory(spec: &NetworkSpec, mode: MemoryMode, elem_bytes: usize) -> Result<MemoryPlan, PlanError> {
    match mode {
        MemoryMode::Naive => build(spec, None, elem_bytes),
        MemoryMode::Fused => {
            let pool = spec
                .layers
                .iter()
                .find(|l| l.pool_stage() == Some(PoolStage::Sfeb))
                .ok_or_else(|| PlanError::UnsupportedFusion {
                    conv: String::new(),
                    pool: String::new(),
                    reason: "network has no SFEB pool".into(),
                })?;
            let at = spec.position(&pool.name).expect("found above");
            let conv = spec.layers[..at]
                .iter()
                .rev()
                .find(|l| l.conv_filters().is_some())
                .ok_or_else(|| PlanError::UnsupportedFusion {
                    conv: String::new(),
                    pool: pool.name.clone(),
                    reason: "no conv before the SFEB pool".into(),
                })?;
            plan_memory_fusing(spec, &conv.name, &pool.name, elem_bytes)
        }
    }
}

/// Fused plan streaming `conv` into `pool`. Only the SFEB max-pool and the
/// conv block directly feeding it can stream.
pub fn plan_memory_fusing(spec: &NetworkSpec, conv: &str, pool: &str, elem_bytes: usize) -> Result<MemoryPlan, PlanError> {
    let fail = |reason: &str| PlanError::UnsupportedFusion {
        conv: conv.to_string(),
        pool: pool.to_string(),
        reason: reason.to_string(),
    };
    let pl = spec.layer(pool).ok_or_else(|| fail("unknown pool layer"))?;
    let LayerKind::MaxPool { kernel, stage } = pl.kind else {
        return Err(fail("not a max-pool"));
    };
    if stage != PoolStage::Sfeb {
        return Err(fail("only the SFEB pool streams its input"));
    }
    let cl = spec.layer(conv).ok_or_else(|| fail("unknown conv layer"))?;
    let LayerKind::Conv {
        kernel: ck, stride: cs, ..
    } = cl.kind
    else {
        return Err(fail("not a conv"));
    };
    let (ci, pi) = (spec.position(conv).unwrap(), spec.position(pool).unwrap());
    let between_ok = ci < pi
        && spec.layers[ci + 1..pi]
            .iter()
            .all(|l| matches!(l.kind, LayerKind::BatchNorm | LayerKind::Relu | LayerKind::Dropout { .. }));
    if !between_ok {
        return Err(fail("pool does not directly consume the conv block"));
    }
    let fusion = Fusion {
        conv: conv.to_string(),
        pool: pool.to_string(),
        segment_cols: kernel.1,
        input_span: receptive_span(kernel.1, ck.1, cs.1),
    };
    build(spec, Some(fusion), elem_bytes)
}

/// Input columns a conv with kernel width `k` and stride `s` reads to
/// produce `cols` adjacent output columns.
pub fn receptive_span(cols: usize, k: usize, s: usize) -> usize {
    (cols.max(1) - 1) * s + k
}

fn build(spec: &NetworkSpec, fusion: Option<Fusion>, elem: usize) -> Result<MemoryPlan, PlanError> {
    let trace = propagate_shapes(spec)?;
    let mut steps = Vec::new();
    let mut buffers = vec![Buffer {
        name: "input".into(),
        bytes: trace.input.numel() * elem,
        first_use: 0,
        last_use: 0,
    }];
    let mut cur = 0usize;
    let sched = schedule(spec);
    let mut i = 0;
    while i < sched.len() {
        let e = &sched[i];
        i += 1;
        if matches!(e.op, Op::Folded | Op::Flatten | Op::Softmax) {
            continue;
        }
        let out = trace.get(&e.name).expect("traced layer").numel() * elem;
        let step = steps.len() + 1;
        buffers[cur].last_use = step;
        if let Some(f) = fusion.as_ref().filter(|f| f.conv == e.name) {
            let conv_out = trace.get(&f.conv).expect("traced layer");
            steps.push(format!("{}+{}", f.conv, f.pool));
            buffers.push(Buffer {
                name: format!("{}.segment", f.conv),
                bytes: conv_out.c * conv_out.h * f.segment_cols * elem,
                first_use: step,
                last_use: step,
            });
            // skip everything up to and including the pool
            while sched[i - 1].name != f.pool {
                i += 1;
            }
            buffers.push(Buffer {
                name: f.pool.clone(),
                bytes: trace.get(&f.pool).expect("traced layer").numel() * elem,
                first_use: step,
                last_use: step,
            });
        } else {
            steps.push(e.name.clone());
            buffers.push(Buffer {
                name: e.name.clone(),
                bytes: out,
                first_use: step,
                last_use: step,
            });
        }
        cur = buffers.len() - 1;
    }
    // the input stays resident until the streamed pool has consumed conv1
    if let Some(f) = &fusion {
        let fused = steps.iter().position(|s| *s == format!("{}+{}", f.conv, f.pool)).expect("fused step") + 1;
        buffers[0].last_use = buffers[0].last_use.max(fused);
    }
    let mut plan = MemoryPlan {
        mode: if fusion.is_some() {
            MemoryMode::Fused
        } else {
            MemoryMode::Naive
        },
        steps,
        buffers,
        peak_bytes: 0,
        peak_step: 0,
        fusion,
    };
    for s in 0..=plan.steps.len() {
        let live = plan.live_bytes(s);
        if live > plan.peak_bytes {
            plan.peak_bytes = live;
            plan.peak_step = s;
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_acdnet, micro_acdnet, LayerSpec};

    #[test]
    fn micro_naive_and_fused() {
        let spec = micro_acdnet();
        let naive = plan_memory(&spec, MemoryMode::Naive, 1).unwrap();
        assert_eq!(naive.buffer("conv1").unwrap().bytes, 7 * 15_109);
        assert_eq!(naive.buffer("conv2").unwrap().bytes, 20 * 7_553);
        assert_eq!(naive.peak_bytes, 105_763 + 151_060);
        assert_eq!(naive.steps[naive.peak_step - 1], "conv2");
        let fused = plan_memory(&spec, MemoryMode::Fused, 1).unwrap();
        let f = fused.fusion.as_ref().unwrap();
        assert_eq!((f.segment_cols, f.input_span), (50, 103));
        assert_eq!(fused.peak_bytes, 30_225 + 105_763 + 20 * 50 + 20 * 151);
        assert!(fused.peak_bytes <= naive.peak_bytes);
    }

    #[test]
    fn peak_is_max_of_live_sums() {
        let spec = build_acdnet(2000, 2000, 4, 2).unwrap();
        for mode in [MemoryMode::Naive, MemoryMode::Fused] {
            let p = plan_memory(&spec, mode, 1).unwrap();
            let brute = (0..=p.steps.len()).map(|s| p.live_bytes(s)).max().unwrap();
            assert_eq!(p.peak_bytes, brute);
            for b in &p.buffers {
                assert!(b.first_use <= b.last_use);
            }
        }
    }

    #[test]
    fn single_layer_peak_is_input_plus_output() {
        let spec = NetworkSpec {
            i_len: 100,
            sr: 100,
            n_cls: 3,
            x: 1,
            layers: vec![LayerSpec::new(
                "conv1",
                LayerKind::Conv {
                    filters: 4,
                    kernel: (1, 9),
                    stride: (1, 1),
                    padding: (0, 0),
                },
            )],
        };
        let p = plan_memory(&spec, MemoryMode::Naive, 1).unwrap();
        assert_eq!(p.peak_bytes, 100 + 4 * 92);
        assert_eq!(plan_memory(&spec, MemoryMode::Naive, 4).unwrap().peak_bytes, 4 * (100 + 4 * 92));
    }

    #[test]
    fn fusion_outside_sfeb_is_rejected() {
        let spec = micro_acdnet();
        for (c, p) in [("conv4", "maxpool2"), ("conv3", "maxpool2"), ("conv1", "maxpool1"), ("nope", "maxpool1")] {
            assert!(matches!(plan_memory_fusing(&spec, c, p, 1), Err(PlanError::UnsupportedFusion { .. })), "{c} {p}");
        }
        assert!(plan_memory_fusing(&spec, "conv2", "maxpool1", 1).is_ok());
    }
}
