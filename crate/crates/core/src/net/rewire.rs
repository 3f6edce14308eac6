use super::{
    propagate_shapes, tfeb_pool_sizes, LayerKind, LayerSpec, NetError, NetworkSpec, PoolStage, Shape, TFEB_POOLS,
};

fn pool_anchor(stage: usize) -> String {
    if stage < TFEB_POOLS {
        format!("relu{}", 2 * stage + 1)
    } else {
        "relu12".to_string()
    }
}

fn tfeb_pool(stage: usize, kernel: (usize, usize)) -> LayerSpec {
    let stage_tag = PoolStage::Tfeb(stage);
    if stage < TFEB_POOLS {
        LayerSpec::new(
            format!("maxpool{}", stage + 1),
            LayerKind::MaxPool {
                kernel,
                stage: stage_tag,
            },
        )
    } else {
        LayerSpec::new(
            "avgpool1",
            LayerKind::AvgPool {
                kernel,
                stage: stage_tag,
            },
        )
    }
}

/// Recomputes every TFEB pool kernel from the current TFEB input extent.
/// Pools whose kernel is (1,1) are dropped and pools that become non-trivial
/// again are re-inserted after their conv block.
pub fn refit_pools(spec: &NetworkSpec) -> Result<NetworkSpec, NetError> {
    let swap = spec
        .position("swapaxes")
        .ok_or_else(|| NetError::UnknownLayer("swapaxes".into()))?;
    let mut layers: Vec<LayerSpec> = spec
        .layers
        .iter()
        .filter(|l| match l.kind {
            LayerKind::MaxPool { stage: PoolStage::Tfeb(_), .. } | LayerKind::AvgPool { stage: PoolStage::Tfeb(_), .. } => false,
            LayerKind::MaxPool { kernel, .. } | LayerKind::AvgPool { kernel, .. } => kernel != (1, 1),
            _ => true,
        })
        .cloned()
        .collect();

    let prefix = NetworkSpec {
        layers: spec.layers[..=swap].to_vec(),
        ..spec.clone()
    };
    let tfeb_in: Shape = propagate_shapes(&prefix)?.output();
    let kernels = tfeb_pool_sizes(tfeb_in.h, tfeb_in.w, TFEB_POOLS);
    for (i, &kernel) in kernels.iter().enumerate() {
        if kernel == (1, 1) {
            continue;
        }
        let stage = i + 1;
        let anchor = pool_anchor(stage);
        let pos = layers
            .iter()
            .position(|l| l.name == anchor)
            .ok_or(NetError::UnknownLayer(anchor))?;
        layers.insert(pos + 1, tfeb_pool(stage, kernel));
    }
    Ok(NetworkSpec { layers, ..spec.clone() })
}

/// Spec-level effect of deleting output channel `channel` of conv `layer`:
/// the filter count drops by one, downstream input extents follow from
/// shape propagation and the TFEB pools are refitted.
pub fn rewire_after_channel_removal(spec: &NetworkSpec, layer: &str, channel: usize) -> Result<NetworkSpec, NetError> {
    let pos = spec
        .position(layer)
        .ok_or_else(|| NetError::UnknownLayer(layer.to_string()))?;
    let mut next = spec.clone();
    match &mut next.layers[pos].kind {
        LayerKind::Conv { filters, .. } => {
            if channel >= *filters {
                return Err(NetError::ChannelRange {
                    layer: layer.to_string(),
                    channel,
                    filters: *filters,
                });
            }
            if *filters == 1 {
                return Err(NetError::LastChannel { layer: layer.to_string() });
            }
            *filters -= 1;
        }
        _ => return Err(NetError::NotConv { layer: layer.to_string() }),
    }
    let next = refit_pools(&next)?;
    let out = propagate_shapes(&next)?.output();
    if out != Shape::new(next.n_cls, 1, 1) {
        return Err(NetError::Shape {
            layer: "softmax".into(),
            reason: format!("output {out} is not ({}, 1, 1)", next.n_cls),
        });
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_acdnet, count_params, micro_acdnet};

    #[test]
    fn conv11_removal_param_delta() {
        let spec = build_acdnet(30_225, 20_000, 50, 8).unwrap();
        let after = rewire_after_channel_removal(&spec, "conv11", 0).unwrap();
        assert_eq!(after.layer("conv11").unwrap().conv_filters(), Some(511));
        // own 3x3 filter over 512 inputs + bias + (γ, β), plus conv12's 1x1 input slice
        let expected = (512 * 9 + 1 + 2) + 50;
        assert_eq!(count_params(&spec).unwrap() - count_params(&after).unwrap(), expected);
    }

    #[test]
    fn conv12_removal_shrinks_dense_input() {
        let spec = build_acdnet(30_225, 20_000, 50, 8).unwrap();
        let after = rewire_after_channel_removal(&spec, "conv12", 3).unwrap();
        let t = propagate_shapes(&after).unwrap();
        assert_eq!(t.get("flatten"), Some(Shape::new(49, 1, 1)));
        assert_eq!(t.get("dense1"), Some(Shape::new(50, 1, 1)));
    }

    #[test]
    fn shrinking_tfeb_height_collapses_pools() {
        let mut spec = micro_acdnet();
        while spec.layer("conv2").unwrap().conv_filters().unwrap() > 1 {
            spec = rewire_after_channel_removal(&spec, "conv2", 0).unwrap();
            for l in &spec.layers {
                if let LayerKind::MaxPool { kernel, .. } | LayerKind::AvgPool { kernel, .. } = l.kind {
                    assert_ne!(kernel, (1, 1), "{} kept as identity pool", l.name);
                }
            }
            assert_eq!(propagate_shapes(&spec).unwrap().output(), Shape::new(50, 1, 1));
        }
        let t = propagate_shapes(&spec).unwrap();
        assert_eq!(t.get("swapaxes"), Some(Shape::new(1, 1, 151)));
        for l in &spec.layers {
            if let LayerKind::MaxPool { kernel, stage: PoolStage::Tfeb(_) } = l.kind {
                assert_eq!(kernel.0, 1);
            }
        }
    }

    #[test]
    fn pools_reappear_when_height_grows_back() {
        let base = micro_acdnet();
        let mut shrunk = base.clone();
        for _ in 0..19 {
            shrunk = rewire_after_channel_removal(&shrunk, "conv2", 0).unwrap();
        }
        let mut grown = shrunk.clone();
        let pos = grown.position("conv2").unwrap();
        if let LayerKind::Conv { filters, .. } = &mut grown.layers[pos].kind {
            *filters = 20;
        }
        assert_eq!(refit_pools(&grown).unwrap(), base);
    }

    #[test]
    fn every_legal_removal_strictly_reduces_params() {
        let spec = build_acdnet(2000, 2000, 4, 2).unwrap();
        let before = count_params(&spec).unwrap();
        for name in spec.conv_names() {
            let after = rewire_after_channel_removal(&spec, name, 0).unwrap();
            assert!(count_params(&after).unwrap() < before, "{name}");
        }
    }

    #[test]
    fn removal_errors() {
        let spec = build_acdnet(2000, 2000, 4, 1).unwrap();
        assert!(matches!(
            rewire_after_channel_removal(&spec, "conv1", 0),
            Err(NetError::LastChannel { .. })
        ));
        assert!(matches!(
            rewire_after_channel_removal(&spec, "bn3", 0),
            Err(NetError::NotConv { .. })
        ));
        assert!(matches!(
            rewire_after_channel_removal(&spec, "conv3", 99),
            Err(NetError::ChannelRange { .. })
        ));
    }
}
