//! Channel importance: filter L1 magnitude and first-order Taylor scores,
//! each normalized by the L2 norm of its layer's raw scores.

use crate::model::{build_forward, ModelError, Mode, Params};
use crate::net::{LayerKind, NetworkSpec};
use crate::tensor::{Real, Tensor};

use super::CompressError;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScore {
    /// Position of the conv among the network's convs.
    pub layer_id: usize,
    pub layer: String,
    pub channel: usize,
    pub raw_score: f64,
    pub normalized_score: f64,
}

fn normalize(layer_id: usize, layer: &str, raw: Vec<f64>) -> Vec<ChannelScore> {
    let norm = raw.iter().map(|r| r * r).sum::<f64>().sqrt();
    raw.into_iter()
        .enumerate()
        .map(|(channel, raw_score)| ChannelScore {
            layer_id,
            layer: layer.to_string(),
            channel,
            raw_score,
            normalized_score: if norm > 0.0 { raw_score / norm } else { 0.0 },
        })
        .collect()
}

/// Raw score of a filter is the sum of its absolute weights.
pub fn channel_scores_magnitude<T: Real>(spec: &NetworkSpec, params: &Params<T>) -> Result<Vec<ChannelScore>, CompressError> {
    let mut out = Vec::new();
    for (layer_id, conv) in spec.conv_names().into_iter().enumerate() {
        let w = params.require(&format!("{conv}.weight"))?;
        let c = w.shape()[0];
        let per = w.len() / c.max(1);
        let raw = w.data().chunks(per).map(|f| f.iter().map(|v| v.abs().as_f64()).sum()).collect();
        out.extend(normalize(layer_id, conv, raw));
    }
    Ok(out)
}

/// Raw score of a channel is `|mean(a · ∂L/∂a)|` over every calibration
/// example and spatial position, where `a` is the conv block's post-ReLU
/// output and `L` the KL loss against the batch targets. Batch-norm runs
/// on its running statistics so examples do not interact.
pub fn channel_scores_taylor<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    calib: &[(Tensor<T>, Tensor<T>)],
) -> Result<Vec<ChannelScore>, CompressError> {
    if calib.iter().all(|(x, _)| x.shape().first().copied().unwrap_or(0) == 0) {
        return Err(CompressError::EmptyCalibration);
    }
    let convs: Vec<&str> = spec.conv_names();
    let mut sums: Vec<Vec<f64>> = convs
        .iter()
        .map(|c| vec![0.0; spec.layer(c).and_then(|l| l.conv_filters()).unwrap_or(0)])
        .collect();
    let mut counts = vec![0usize; convs.len()];
    for (x, y) in calib {
        let n = x.shape()[0];
        if n == 0 {
            continue;
        }
        let mut f = build_forward(spec, params, x.clone(), Mode::Infer)?;
        let target = f.graph.input("target", y.clone());
        let loss = f.graph.kl_div("loss", f.probs, target).map_err(ModelError::from)?;
        f.graph.forward().map_err(ModelError::from)?;
        let grads = f.graph.backward(loss).map_err(ModelError::from)?;
        for (k, conv) in convs.iter().enumerate() {
            let Some(&id) = f.activations.get(*conv) else { continue };
            let a = f.graph.value(id).expect("evaluated");
            let c = a.shape()[1];
            let spatial = a.len() / (n * c);
            counts[k] += n * spatial;
            let Some(g) = grads.get(id) else { continue };
            // gradients of a batch-mean loss carry a 1/n factor
            let scale = n as f64;
            for (i, (&av, &gv)) in a.data().iter().zip(g.data()).enumerate() {
                let ch = (i / spatial) % c;
                sums[k][ch] += av.as_f64() * gv.as_f64() * scale;
            }
        }
    }
    let mut out = Vec::new();
    for (k, conv) in convs.iter().enumerate() {
        let cnt = counts[k].max(1) as f64;
        let raw = sums[k].iter().map(|s| (s / cnt).abs()).collect();
        out.extend(normalize(k, conv, raw));
    }
    Ok(out)
}

/// Names of the convs ahead of the axis swap.
pub fn sfeb_convs(spec: &NetworkSpec) -> Vec<&str> {
    spec.layers
        .iter()
        .take_while(|l| l.kind != LayerKind::SwapAxes)
        .filter(|l| l.conv_filters().is_some())
        .map(|l| l.name.as_str())
        .collect()
}

/// Lowest normalized score among layers that keep at least one filter
/// afterwards, ties broken by `(layer_id, channel)`.
pub fn select_candidate<'a>(spec: &NetworkSpec, scores: &'a [ChannelScore], prune_sfeb: bool) -> Option<&'a ChannelScore> {
    let sfeb = sfeb_convs(spec);
    scores
        .iter()
        .filter(|s| prune_sfeb || !sfeb.contains(&s.layer.as_str()))
        .filter(|s| spec.layer(&s.layer).and_then(|l| l.conv_filters()).is_some_and(|f| f > 1))
        .min_by(|a, b| {
            a.normalized_score
                .total_cmp(&b.normalized_score)
                .then((a.layer_id, a.channel).cmp(&(b.layer_id, b.channel)))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::build_acdnet;

    #[test]
    fn magnitude_hand_example() {
        let raw = vec![2.0, 3.0];
        let s = normalize(0, "conv3", raw);
        assert!((s[0].normalized_score - 2.0 / 13f64.sqrt()).abs() < 1e-12);
        assert!((s[1].normalized_score - 3.0 / 13f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn protected_sfeb_never_selected() {
        let spec = build_acdnet(2000, 2000, 4, 1).unwrap();
        let mut params = Params::<f32>::init(&spec, 0).unwrap();
        for v in params.get_mut("conv2.weight").unwrap().data_mut() {
            *v = 0.0;
        }
        let scores = channel_scores_magnitude(&spec, &params).unwrap();
        assert_eq!(select_candidate(&spec, &scores, true).unwrap().layer, "conv2");
        let pick = select_candidate(&spec, &scores, false).unwrap();
        assert!(pick.layer != "conv1" && pick.layer != "conv2");
        assert_eq!(sfeb_convs(&spec), vec!["conv1", "conv2"]);
    }

    #[test]
    fn single_filter_layers_are_not_candidates() {
        let spec = build_acdnet(2000, 2000, 4, 1).unwrap();
        let params = Params::<f32>::init(&spec, 0).unwrap();
        let scores = channel_scores_magnitude(&spec, &params).unwrap();
        // conv1 has one filter at x = 1
        assert!(scores.iter().any(|s| s.layer == "conv1"));
        let only_conv1: Vec<ChannelScore> = scores.into_iter().filter(|s| s.layer == "conv1").collect();
        assert!(select_candidate(&spec, &only_conv1, true).is_none());
    }
}
