use super::{propagate_shapes, LayerKind, NetError, NetworkSpec};

/// Model size and compute totals. FLOPs are multiply-accumulates of conv
/// and dense layers; parameters include conv/dense biases and BN (γ, β)
/// but not BN running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub filters: usize,
    pub params: usize,
    pub flops: usize,
    pub size_bytes_f32: usize,
}

pub fn count_filters(spec: &NetworkSpec) -> usize {
    spec.layers.iter().filter_map(|l| l.conv_filters()).sum()
}

pub fn count_params(spec: &NetworkSpec) -> Result<usize, NetError> {
    Ok(cost_report(spec)?.params)
}

pub fn count_flops(spec: &NetworkSpec) -> Result<usize, NetError> {
    Ok(cost_report(spec)?.flops)
}

pub fn cost_report(spec: &NetworkSpec) -> Result<CostReport, NetError> {
    let trace = propagate_shapes(spec)?;
    let (mut params, mut flops) = (0usize, 0usize);
    for (i, layer) in spec.layers.iter().enumerate() {
        let input = trace.input_of(i);
        let out = trace.layers[i].1;
        match layer.kind {
            LayerKind::Conv { filters, kernel, .. } => {
                let volume = input.c * kernel.0 * kernel.1;
                params += filters * volume + filters;
                flops += filters * volume * out.h * out.w;
            }
            LayerKind::BatchNorm => params += 2 * input.c,
            LayerKind::Dense { units } => {
                let din = input.numel();
                params += units * din + units;
                flops += units * din;
            }
            _ => {}
        }
    }
    Ok(CostReport {
        filters: count_filters(spec),
        params,
        flops,
        size_bytes_f32: 4 * params,
    })
}
