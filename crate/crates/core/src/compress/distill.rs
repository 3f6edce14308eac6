//! Knowledge-distillation losses mixing a softened teacher term with the hard-label term.

use crate::graph::{ComputeGraph, GraphError, NodeId};
use crate::ops::{self, cross_entropy_loss, kl_div_loss, softmax};
use crate::tensor::{Real, Tensor, TensorError};

use super::CompressError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistillLoss {
    /// Cross-entropy on both terms.
    #[default]
    L1,
    /// KL on the softened term, cross-entropy on the label term.
    L2,
    /// KL on both terms.
    L3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub loss: DistillLoss,
    pub temperature: f64,
    /// Weight of the label term; the softened term gets `1 - alpha`.
    pub alpha: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            loss: DistillLoss::L1,
            temperature: 4.0,
            alpha: 0.1,
        }
    }
}

impl DistillConfig {
    pub fn beta(&self) -> f64 {
        1.0 - self.alpha
    }

    pub fn validate(&self) -> Result<(), CompressError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CompressError::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CompressError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }

    /// Whether the (softened, label) terms use KL rather than cross-entropy.
    fn kl_terms(&self) -> (bool, bool) {
        match self.loss {
            DistillLoss::L1 => (false, false),
            DistillLoss::L2 => (true, false),
            DistillLoss::L3 => (true, true),
        }
    }
}

fn soften<T: Real>(logits: &Tensor<T>, t: f64) -> Result<Tensor<T>, TensorError> {
    let inv = T::lit(1.0 / t);
    softmax(&logits.map(|v| v * inv))
}

/// Batch-mean distillation loss from raw logits and a target distribution.
pub fn distill_loss<T: Real>(
    student_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &DistillConfig,
) -> Result<f64, CompressError> {
    cfg.validate()?;
    let t = cfg.temperature;
    let (soft_kl, hard_kl) = cfg.kl_terms();
    let s_soft = soften(student_logits, t)?;
    let t_soft = soften(teacher_logits, t)?;
    let soft = if soft_kl {
        kl_div_loss(&s_soft, &t_soft)?
    } else {
        cross_entropy_loss(&s_soft, &t_soft)?
    };
    let s = softmax(student_logits)?;
    let hard = if hard_kl {
        kl_div_loss(&s, target)?
    } else {
        cross_entropy_loss(&s, target)?
    };
    Ok(soft.as_f64() * cfg.beta() * t * t + hard.as_f64() * cfg.alpha)
}

/// Appends the distillation loss to a graph holding the student `logits`
/// and probabilities `probs`; returns the scalar loss node.
pub fn distill_loss_node<T: Real>(
    g: &mut ComputeGraph<T>,
    logits: NodeId,
    probs: NodeId,
    teacher_logits: &Tensor<T>,
    target: NodeId,
    cfg: &DistillConfig,
) -> Result<NodeId, CompressError> {
    cfg.validate()?;
    let t = cfg.temperature;
    let (soft_kl, hard_kl) = cfg.kl_terms();
    let scaled = g.scale("distill_scale", logits, T::lit(1.0 / t));
    let s_soft = g.softmax("distill_softmax", scaled)?;
    let t_soft = g.input("teacher_soft", soften(teacher_logits, t)?);
    let soft = if soft_kl {
        g.kl_div("distill_soft", s_soft, t_soft)?
    } else {
        g.cross_entropy("distill_soft", s_soft, t_soft)?
    };
    let hard = if hard_kl {
        g.kl_div("distill_hard", probs, target)?
    } else {
        g.cross_entropy("distill_hard", probs, target)?
    };
    let soft = g.scale("distill_soft_w", soft, T::lit(cfg.beta() * t * t));
    let hard = g.scale("distill_hard_w", hard, T::lit(cfg.alpha));
    Ok(g.add("distill_loss", soft, hard)?)
}

impl From<GraphError> for CompressError {
    fn from(e: GraphError) -> Self {
        CompressError::Model(e.into())
    }
}

impl From<TensorError> for CompressError {
    fn from(e: TensorError) -> Self {
        CompressError::Model(crate::model::ModelError::Op {
            layer: "distill".into(),
            source: e,
        })
    }
}

/// Mean entropy of the softened teacher distribution.
pub fn soft_entropy<T: Real>(teacher_logits: &Tensor<T>, t: f64) -> Result<f64, CompressError> {
    Ok(ops::entropy(&soften(teacher_logits, t)?)?.as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(&[4, 5], |_| rng.random_range(-3.0..3.0))
    }

    #[test]
    fn l3_vanishes_when_everything_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_logits(&mut rng);
        let target = softmax(&s).unwrap();
        let cfg = DistillConfig {
            loss: DistillLoss::L3,
            temperature: 1.0,
            alpha: 0.1,
        };
        assert!(distill_loss(&s, &s, &target, &cfg).unwrap().abs() < 1e-12);
    }

    #[test]
    fn zero_alpha_keeps_only_soft_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (s, te) = (random_logits(&mut rng), random_logits(&mut rng));
        let target = softmax(&random_logits(&mut rng)).unwrap();
        let other = softmax(&random_logits(&mut rng)).unwrap();
        for loss in [DistillLoss::L1, DistillLoss::L2, DistillLoss::L3] {
            let cfg = DistillConfig {
                loss,
                temperature: 3.0,
                alpha: 0.0,
            };
            let a = distill_loss(&s, &te, &target, &cfg).unwrap();
            let b = distill_loss(&s, &te, &other, &cfg).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_minus_l1_is_scaled_teacher_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (s, te) = (random_logits(&mut rng), random_logits(&mut rng));
            let target = softmax(&random_logits(&mut rng)).unwrap();
            let t: f64 = rng.random_range(1.0..5.0);
            let base = DistillConfig {
                loss: DistillLoss::L1,
                temperature: t,
                alpha: 0.1,
            };
            let l1 = distill_loss(&s, &te, &target, &base).unwrap();
            let l2 = distill_loss(&s, &te, &target, &DistillConfig { loss: DistillLoss::L2, ..base }).unwrap();
            let h = soft_entropy(&te, t).unwrap();
            assert!((l2 - l1 + 0.9 * t * t * h).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_loss_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (s, te) = (random_logits(&mut rng), random_logits(&mut rng));
        let target = softmax(&random_logits(&mut rng)).unwrap();
        for loss in [DistillLoss::L1, DistillLoss::L2, DistillLoss::L3] {
            let cfg = DistillConfig {
                loss,
                temperature: 2.5,
                alpha: 0.3,
            };
            let mut g = ComputeGraph::new();
            let logits = g.input("s", s.clone());
            let probs = g.softmax("p", logits).unwrap();
            let y = g.input("y", target.clone());
            let l = distill_loss_node(&mut g, logits, probs, &te, y, &cfg).unwrap();
            g.forward().unwrap();
            let direct = distill_loss(&s, &te, &target, &cfg).unwrap();
            assert!((g.value(l).unwrap().data()[0] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_nonpositive_temperature() {
        let s = Tensor::<f64>::zeros(&[1, 2]);
        let y = softmax(&s).unwrap();
        let cfg = DistillConfig {
            temperature: 0.0,
            ..DistillConfig::default()
        };
        assert!(matches!(distill_loss(&s, &s, &y, &cfg), Err(CompressError::Config(_))));
    }
}
