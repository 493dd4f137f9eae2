//! Loss terms. Scalar forms serve as hand-checkable references; the graph forms
//! build one tuple's contribution on a tape.

use crate::autograd::{Graph, Var};
use crate::corpus::TrainingTuple;
use crate::error::{Error, Result};
use crate::models::{expected_q, ModelBundle, PlannerOutput, PolicyDistribution, Trainable};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::QInputMode;

pub const DEFAULT_EXP_CLIP: f64 = 20.0;

/// `|tau - 1[u < 0]| * u^2` with `u = q - v`.
pub fn expectile_loss(q: f64, v: f64, tau: f64) -> f64 {
    let u = q - v;
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

/// Squared TD error against `reward + gamma * v_next`, with `v_next` ignored on terminal tuples.
pub fn q_td_loss(q: f64, reward: f64, v_next: f64, gamma: f64, is_terminal: bool) -> f64 {
    let target = reward + if is_terminal { 0.0 } else { gamma * v_next };
    (target - q).powi(2)
}

/// KL(p || q) in nats; terms with `p_k = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a / b).ln()).sum()
}

/// `min(exp(scale * advantage), clip)`.
pub fn advantage_weight(advantage: f64, scale: f64, clip: f64) -> f64 {
    (scale * advantage).exp().min(clip)
}

/// Q(h, z) for a label under the configured reading, minus V(h).
pub fn advantage(out: &PlannerOutput, label: &PolicyDistribution, mode: QInputMode) -> Result<f64> {
    Ok(q_for_label(&out.q, label, mode)? - out.v)
}

pub fn q_for_label(q: &[f64], label: &PolicyDistribution, mode: QInputMode) -> Result<f64> {
    match mode {
        QInputMode::Expected => expected_q(q, label),
        QInputMode::Argmax => {
            if q.len() != label.k() {
                return Err(Error::Shape(format!("{} Q values for a label over {}", q.len(), label.k())));
            }
            Ok(q[label.argmax()])
        }
    }
}

fn label_row<S: Scalar>(label: &PolicyDistribution) -> Vec<S> {
    label.probs().iter().map(|&p| S::from_f64_lossy(p)).collect()
}

/// Weights over codes that turn the Q row into Q(h, z).
fn q_selector<S: Scalar>(label: &PolicyDistribution, mode: QInputMode) -> Tensor<S> {
    let w: Vec<S> = match mode {
        QInputMode::Expected => label_row(label),
        QInputMode::Argmax => {
            let mut w = vec![S::zero(); label.k()];
            w[label.argmax()] = S::one();
            w
        }
    };
    Tensor::from_vec(label.k(), 1, w).expect("column")
}

/// 1 x 1 Q(h, z) from a 1 x K row of Q values.
pub fn q_term<'p, S: Scalar>(g: &mut Graph<'p, S>, qrow: Var, label: &PolicyDistribution, mode: QInputMode) -> Var {
    let sel = g.constant(q_selector(label, mode));
    g.matmul(qrow, sel)
}

pub fn expectile_term<'p, S: Scalar>(g: &mut Graph<'p, S>, q: Var, v: Var, tau: f64) -> Var {
    let q = g.detach(q);
    let u = g.sub(q, v);
    let w = if g.scalar(u) < S::zero() { 1.0 - tau } else { tau };
    let sq = g.mul(u, u);
    g.scale(sq, S::from_f64_lossy(w))
}

pub fn td_term<'p, S: Scalar>(g: &mut Graph<'p, S>, q: Var, reward: f64, v_next: f64, gamma: f64, is_terminal: bool) -> Var {
    let target = reward + if is_terminal { 0.0 } else { gamma * v_next };
    let t = g.constant(Tensor::scalar(S::from_f64_lossy(target)));
    let diff = g.sub(t, q);
    g.mul(diff, diff)
}

/// Mean per-token NLL of a tuple's system utterance when the generator receives
/// zero-valued policy tokens.
pub fn pretrain_term<'p, S: Scalar>(g: &mut Graph<'p, S>, b: &'p ModelBundle<S>, t: &TrainingTuple, tr: Trainable) -> Result<Var> {
    let ex = b.generator_example(&t.history, &t.sys_utterance)?;
    let prefix = g.constant(b.zero_prefix());
    let nll = b.generator_nll_sum(g, prefix, &ex, tr);
    Ok(g.scale(nll, S::one() / S::from_usize_lossy(ex.targets.len())))
}

/// Mean per-token reconstruction NLL of the system utterance through
/// encoder, codebook mixture, P-Former and generator.
pub fn reconstruction_term<'p, S: Scalar>(
    g: &mut Graph<'p, S>,
    b: &'p ModelBundle<S>,
    t: &TrainingTuple,
    tr: Trainable,
) -> Result<Var> {
    let ex = b.generator_example(&t.history, &t.sys_utterance)?;
    let ids = b.encoder_ids(&t.sys_utterance);
    let logits = b.encoder_logits(g, &ids, tr);
    let probs = g.softmax(logits);
    let z = b.mix(g, probs, tr);
    let tokens = b.pformer(g, z, tr);
    let nll = b.generator_nll_sum(g, tokens, &ex, tr);
    Ok(g.scale(nll, S::one() / S::from_usize_lossy(ex.targets.len())))
}

/// KL from the (constant) label to the planner's distribution.
pub fn distill_term<'p, S: Scalar>(g: &mut Graph<'p, S>, policy_logits: Var, label: &PolicyDistribution) -> Var {
    g.kl_from_target(policy_logits, &label_row::<S>(label))
}

/// `weight * CE(label || planner)`.
pub fn awr_term<'p, S: Scalar>(g: &mut Graph<'p, S>, policy_logits: Var, label: &PolicyDistribution, weight: f64) -> Var {
    let ce = g.soft_cross_entropy(policy_logits, &label_row::<S>(label));
    g.scale(ce, S::from_f64_lossy(weight))
}

/// `weight * sum_i -log p(w_i | h, z, w_<i)` with `z` the codebook mixture of `label`.
pub fn token_term<'p, S: Scalar>(
    g: &mut Graph<'p, S>,
    b: &'p ModelBundle<S>,
    t: &TrainingTuple,
    label: &PolicyDistribution,
    weight: f64,
    tr: Trainable,
) -> Result<Var> {
    let ex = b.generator_example(&t.history, &t.sys_utterance)?;
    let probs = g.constant(Tensor::from_vec(1, label.k(), label_row(label))?);
    let z = b.mix(g, probs, tr);
    let tokens = b.pformer(g, z, tr);
    let nll = b.generator_nll_sum(g, tokens, &ex, tr);
    Ok(g.scale(nll, S::from_f64_lossy(weight)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert!((expectile_loss(0.0, 1.0, 0.7) - 0.3).abs() < 1e-12);
        assert_eq!(expectile_loss(2.0, 2.0, 0.9), 0.0);
        assert_eq!(q_td_loss(1.0, 1.0, 0.0, 0.999, false), 0.0);
        assert!((q_td_loss(0.0, 0.1, 0.5, 0.999, false) - 0.359_400_25).abs() < 1e-9);
        assert_eq!(q_td_loss(0.3, 0.1, 123.0, 0.999, true), q_td_loss(0.3, 0.1, 0.0, 0.999, false));
        assert!((kl_divergence(&[0.5, 0.5], &[0.25, 0.75]) - 0.143_841_036).abs() < 1e-8);
        assert!((advantage_weight(0.5, 1.0, 20.0) - 1.648_721_27).abs() < 1e-8);
        assert_eq!(advantage_weight(10.0, 1.0, 20.0), 20.0);
        assert_eq!(advantage_weight(3.0, 0.0, 20.0), 1.0);
    }

    #[test]
    fn symmetric_expectile_is_half_squared_error() {
        let mut rng = crate::rng::rng_for(0, "expectile");
        for _ in 0..1000 {
            let q: f64 = rand::Rng::gen_range(&mut rng, -5.0..5.0);
            let v: f64 = rand::Rng::gen_range(&mut rng, -5.0..5.0);
            assert_eq!(expectile_loss(q, v, 0.5), 0.5 * (q - v) * (q - v));
        }
    }

    #[test]
    fn argmax_and_expected_agree_on_one_hot() {
        let out = PlannerOutput { policy: PolicyDistribution::uniform(3), q: vec![0.2, -1.0, 0.7], v: 0.1 };
        let one = PolicyDistribution::one_hot(3, 2);
        let a = advantage(&out, &one, QInputMode::Argmax).unwrap();
        let e = advantage(&out, &one, QInputMode::Expected).unwrap();
        assert_eq!(a, e);
        assert!((a - 0.6).abs() < 1e-12);
        let flat = PlannerOutput { q: vec![0.4; 3], ..out };
        let soft = PolicyDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!((advantage(&flat, &soft, QInputMode::Expected).unwrap() - 0.3).abs() < 1e-12);
    }
}
