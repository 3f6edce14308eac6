//! Seeded gradient-check sweeps over every operator and over a whole network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{max_relative_error, numeric_grad, relative_error, FD_STEP};
use crate::model::{build_forward, is_trainable, ModelError, Mode, Params};
use crate::net::NetworkSpec;
use crate::ops::{self, Conv2dConfig, BN_EPS};
use crate::tensor::Tensor;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values spaced 0.05 apart in random order, so no max-pool window has a
/// near tie and no probe crosses a ReLU kink.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * 0.05).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("length matches")
}

/// `L = Σ r ⊙ y` for a fixed random `r`; its gradient with respect to `y` is `r`.
fn projection(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Maximum relative error of every operator's backward pass against central
/// differences on random inputs drawn from `seed`.
pub fn operator_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // conv2d with stride and padding
    let x = uniform(&mut rng, &[2, 2, 5, 7], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = uniform(&mut rng, &[3], -1.0, 1.0);
    let cfg = Conv2dConfig {
        stride: (1, 2),
        padding: (1, 1),
    };
    let y = ops::conv2d(&x, &w, &b, cfg).unwrap();
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
    let g = ops::conv2d_backward(&x, &w, cfg, &r).unwrap();
    let nx = numeric_grad(&x, |t| projection(&ops::conv2d(t, &w, &b, cfg).unwrap(), &r));
    let nw = numeric_grad(&w, |t| projection(&ops::conv2d(&x, t, &b, cfg).unwrap(), &r));
    let nb = numeric_grad(&b, |t| projection(&ops::conv2d(&x, &w, t, cfg).unwrap(), &r));
    out.push((
        "conv2d",
        max_relative_error(&g.input, &nx)
            .max(max_relative_error(&g.weight, &nw))
            .max(max_relative_error(&g.bias, &nb)),
    ));

    // batch-norm, training statistics
    let x = uniform(&mut rng, &[3, 2, 2, 3], -2.0, 2.0);
    let gamma = uniform(&mut rng, &[2], 0.5, 1.5);
    let beta = uniform(&mut rng, &[2], -0.5, 0.5);
    let (y, cache) = ops::batchnorm_train(&x, &gamma, &beta, BN_EPS).unwrap();
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
    let g = ops::batchnorm_train_backward(&cache, &gamma, &r).unwrap();
    let bn = |x: &Tensor<f64>, ga: &Tensor<f64>, be: &Tensor<f64>| {
        projection(&ops::batchnorm_train(x, ga, be, BN_EPS).unwrap().0, &r)
    };
    let nx = numeric_grad(&x, |t| bn(t, &gamma, &beta));
    let ng = numeric_grad(&gamma, |t| bn(&x, t, &beta));
    let nb = numeric_grad(&beta, |t| bn(&x, &gamma, t));
    out.push((
        "batchnorm_train",
        max_relative_error(&g.input, &nx)
            .max(max_relative_error(&g.gamma, &ng))
            .max(max_relative_error(&g.beta, &nb)),
    ));

    // batch-norm, running statistics
    let mean = uniform(&mut rng, &[2], -0.5, 0.5);
    let var = uniform(&mut rng, &[2], 0.5, 2.0);
    let y = ops::batchnorm_infer(&x, &gamma, &beta, &mean, &var, BN_EPS).unwrap();
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
    let g = ops::batchnorm_infer_backward(&x, &gamma, &mean, &var, BN_EPS, &r).unwrap();
    let bn = |x: &Tensor<f64>, ga: &Tensor<f64>, be: &Tensor<f64>| {
        projection(&ops::batchnorm_infer(x, ga, be, &mean, &var, BN_EPS).unwrap(), &r)
    };
    let nx = numeric_grad(&x, |t| bn(t, &gamma, &beta));
    let ng = numeric_grad(&gamma, |t| bn(&x, t, &beta));
    let nb = numeric_grad(&beta, |t| bn(&x, &gamma, t));
    out.push((
        "batchnorm_infer",
        max_relative_error(&g.input, &nx)
            .max(max_relative_error(&g.gamma, &ng))
            .max(max_relative_error(&g.beta, &nb)),
    ));

    // pools
    let x = spaced(&mut rng, &[2, 3, 4, 7]);
    let (y, arg) = ops::maxpool(&x, (2, 3)).unwrap();
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
    let g = ops::maxpool_backward(x.shape(), &arg, &r).unwrap();
    let n = numeric_grad(&x, |t| projection(&ops::maxpool(t, (2, 3)).unwrap().0, &r));
    out.push(("maxpool", max_relative_error(&g, &n)));

    let y = ops::avgpool(&x, (2, 3)).unwrap();
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
    let g = ops::avgpool_backward(x.shape(), (2, 3), &r).unwrap();
    let n = numeric_grad(&x, |t| projection(&ops::avgpool(t, (2, 3)).unwrap(), &r));
    out.push(("avgpool", max_relative_error(&g, &n)));

    // relu
    let x = spaced(&mut rng, &[2, 2, 3, 3]);
    let r = uniform(&mut rng, x.shape(), -1.0, 1.0);
    let g = ops::relu_backward(&x, &r).unwrap();
    let n = numeric_grad(&x, |t| projection(&ops::relu(t), &r));
    out.push(("relu", max_relative_error(&g, &n)));

    // swap axes
    let x = uniform(&mut rng, &[2, 3, 4, 2], -1.0, 1.0);
    let y = ops::swap_channel_height(&x).unwrap();
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
    let g = ops::swap_channel_height(&r).unwrap();
    let n = numeric_grad(&x, |t| projection(&ops::swap_channel_height(t).unwrap(), &r));
    out.push(("swapaxes", max_relative_error(&g, &n)));

    // dense
    let x = uniform(&mut rng, &[3, 5], -1.0, 1.0);
    let w = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    let b = uniform(&mut rng, &[4], -1.0, 1.0);
    let y = ops::dense(&x, &w, &b).unwrap();
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
    let g = ops::dense_backward(&x, &w, &r).unwrap();
    let nx = numeric_grad(&x, |t| projection(&ops::dense(t, &w, &b).unwrap(), &r));
    let nw = numeric_grad(&w, |t| projection(&ops::dense(&x, t, &b).unwrap(), &r));
    let nb = numeric_grad(&b, |t| projection(&ops::dense(&x, &w, t).unwrap(), &r));
    out.push((
        "dense",
        max_relative_error(&g.input, &nx)
            .max(max_relative_error(&g.weight, &nw))
            .max(max_relative_error(&g.bias, &nb)),
    ));

    // softmax and both losses (through softmax, so probes stay on the simplex)
    let z = uniform(&mut rng, &[3, 5], -3.0, 3.0);
    let p = ops::softmax(&z).unwrap();
    let r = uniform(&mut rng, p.shape(), -1.0, 1.0);
    let g = ops::softmax_backward(&p, &r).unwrap();
    let n = numeric_grad(&z, |t| projection(&ops::softmax(t).unwrap(), &r));
    out.push(("softmax", max_relative_error(&g, &n)));

    let target = ops::softmax(&uniform(&mut rng, &[3, 5], -3.0, 3.0)).unwrap();
    let dl = ops::kl_div_loss_backward(&p, &target, 1.0).unwrap();
    let g = ops::softmax_backward(&p, &dl).unwrap();
    let n = numeric_grad(&z, |t| ops::kl_div_loss(&ops::softmax(t).unwrap(), &target).unwrap());
    out.push(("kl_div_loss", max_relative_error(&g, &n)));

    let dl = ops::cross_entropy_loss_backward(&p, &target, 1.0).unwrap();
    let g = ops::softmax_backward(&p, &dl).unwrap();
    let n = numeric_grad(&z, |t| ops::cross_entropy_loss(&ops::softmax(t).unwrap(), &target).unwrap());
    out.push(("cross_entropy_loss", max_relative_error(&g, &n)));

    out
}

#[derive(Debug, Clone)]
pub struct NetworkCheck {
    pub max_rel_err: f64,
    /// Parameter element with the largest error.
    pub worst: String,
    pub checked: usize,
    /// Probes redrawn because a ±step evaluation switched a ReLU or max-pool branch.
    pub redrawn: usize,
}

/// Compares backprop against central differences for `per_tensor` random
/// elements of every trainable tensor, with the KL loss on random soft
/// targets, batch-norm in training mode and dropout active. Probes whose
/// ±step evaluations leave the smooth piece of the base point are redrawn.
pub fn network_check(spec: &NetworkSpec, seed: u64, batch: usize, per_tensor: usize) -> Result<NetworkCheck, ModelError> {
    const MAX_DRAWS: usize = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Params<f64> = Params::init(spec, seed)?;
    for (name, t) in params.iter_mut() {
        let range = if name.ends_with(".gamma") {
            0.5..1.5
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            -0.1..0.1
        } else {
            continue;
        };
        for v in t.data_mut() {
            *v = rng.random_range(range.clone());
        }
    }
    let x = uniform(&mut rng, &[batch, 1, 1, spec.i_len], -1.0, 1.0);
    let target = ops::softmax(&uniform(&mut rng, &[batch, spec.n_cls], -2.0, 2.0)).expect("rank 2");

    let mut f = build_forward(spec, &params, x, Mode::Train { dropout_seed: seed })?;
    let t = f.graph.input("target", target);
    let loss = f.graph.kl_div("loss", f.probs, t)?;
    f.graph.forward()?;
    let grads = f.graph.backward(loss)?;
    let base_sig = f.graph.branch_signature();

    let mut worst = (0.0, String::new());
    let (mut checked, mut redrawn) = (0, 0);
    let names: Vec<String> = f.params.keys().filter(|n| is_trainable(n)).cloned().collect();
    for name in names {
        let id = f.params[&name];
        let base = params.require(&name)?.clone();
        let analytic = grads.get(id).expect("parameters receive gradients").clone();
        let want = per_tensor.min(base.len());
        let mut done = 0;
        for _ in 0..MAX_DRAWS {
            if done == want {
                break;
            }
            let idx = rng.random_range(0..base.len());
            let mut eval = |delta: f64| -> Result<(f64, u64), ModelError> {
                let mut probe = base.clone();
                probe.data_mut()[idx] += delta;
                f.graph.set_leaf(id, probe)?;
                f.graph.forward()?;
                Ok((f.graph.value(loss).expect("evaluated").data()[0], f.graph.branch_signature()))
            };
            // a smaller step first, before giving up on this element
            let mut numeric = None;
            for step in [FD_STEP, FD_STEP / 10.0] {
                let (plus, sp) = eval(step)?;
                let (minus, sm) = eval(-step)?;
                if sp == base_sig && sm == base_sig {
                    numeric = Some((plus - minus) / (2.0 * step));
                    break;
                }
            }
            let Some(numeric) = numeric else {
                redrawn += 1;
                continue;
            };
            let err = relative_error(analytic.data()[idx], numeric);
            checked += 1;
            done += 1;
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, format!("{name}[{idx}]"));
            }
        }
        f.graph.set_leaf(id, base)?;
    }
    Ok(NetworkCheck {
        max_rel_err: worst.0,
        worst: worst.1,
        checked,
        redrawn,
    })
}
