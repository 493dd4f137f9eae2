//! Generator pretraining, the three optimisation stages and pseudo-labelling.

use log::info;
use rand::seq::SliceRandom;

use super::config::{TrainConfig, TrainStage};
use super::losses::{
    advantage_weight, awr_term, distill_term, expectile_term, pretrain_term, q_term, reconstruction_term,
    td_term, token_term,
};
use super::optim::Adam;
use super::report::LossReport;
use crate::autograd::{Gradients, Graph, Var};
use crate::corpus::TrainingTuple;
use crate::error::{Error, Result};
use crate::models::{ModelBundle, PolicyDistribution, Stage, StageManifest, Trainable};
use crate::rng::rng_for;
use crate::scalar::Scalar;

/// Per-run knobs that are not part of the experiment config.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Stop after this many optimizer steps (all epochs otherwise).
    pub max_steps: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct StageOutcome {
    pub reports: Vec<LossReport>,
    pub epochs_done: usize,
    pub steps: usize,
}

/// Called after every completed epoch with its 1-based index.
pub type EpochHook<'a, S> = &'a mut dyn FnMut(usize, &ModelBundle<S>) -> Result<()>;

/// Loss parts of one batch and the gradient of their sum.
pub struct BatchStep<S> {
    pub report: LossReport,
    pub grads: Gradients<S>,
}

fn backprop<S: Scalar>(g: &Graph<'_, S>, terms: &[(Var, f64)], grads: &mut Gradients<S>) {
    // Backward runs once per term; terms are few and each starts from a scalar root.
    for &(v, scale) in terms {
        if scale == 0.0 || !g.requires_grad(v) {
            continue;
        }
        let mut part = g.backward(v);
        part.scale(S::from_f64_lossy(scale));
        grads.merge(part);
    }
}

fn value<S: Scalar>(g: &Graph<'_, S>, v: Var) -> f64 {
    g.scalar(v).as_f64()
}

pub fn pretrain_step<S: Scalar>(b: &ModelBundle<S>, batch: &[&TrainingTuple]) -> Result<BatchStep<S>> {
    let tr = Trainable { generator: true, ..Trainable::NONE };
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::default();
    let mut con = 0.0;
    for t in batch {
        let mut g = Graph::new();
        let l = pretrain_term(&mut g, b, t, tr)?;
        con += value(&g, l) * scale;
        backprop(&g, &[(l, scale)], &mut grads);
    }
    Ok(BatchStep { report: LossReport { l_con: Some(con), ..Default::default() }.finish(), grads })
}

/// Mean reconstruction loss; gradients reach encoder, codebook and P-Former.
pub fn stage1_step<S: Scalar>(b: &ModelBundle<S>, batch: &[&TrainingTuple]) -> Result<BatchStep<S>> {
    let tr = Trainable { encoder: true, codebook: true, pformer: true, ..Trainable::NONE };
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::default();
    let mut con = 0.0;
    for t in batch {
        let mut g = Graph::new();
        let l = reconstruction_term(&mut g, b, t, tr)?;
        con += value(&g, l) * scale;
        backprop(&g, &[(l, scale)], &mut grads);
    }
    Ok(BatchStep { report: LossReport { l_con: Some(con), ..Default::default() }.finish(), grads })
}

fn labeled(t: &TrainingTuple) -> Result<(f64, &PolicyDistribution)> {
    match (t.reward, &t.pseudo_label) {
        (Some(r), Some(l)) => Ok((r, l)),
        _ => Err(Error::Precondition(format!("tuple {} lacks a reward or pseudo-label", t.id()))),
    }
}

fn next_value<S: Scalar>(b: &ModelBundle<S>, t: &TrainingTuple) -> f64 {
    if t.is_terminal {
        0.0
    } else {
        b.v_value(&t.next_history)
    }
}

/// Filtered distillation plus Q/V regression.
pub fn stage2_step<S: Scalar>(b: &ModelBundle<S>, batch: &[&TrainingTuple], cfg: &TrainConfig) -> Result<BatchStep<S>> {
    let tr = Trainable { planner: true, q_head: true, v_head: true, ..Trainable::NONE };
    let survivors = batch.iter().filter(|t| t.reward.is_some_and(|r| r > cfg.delta)).count();
    let scale = 1.0 / batch.len() as f64;
    let kl_scale = if survivors == 0 { 0.0 } else { 1.0 / survivors as f64 };
    let mut grads = Gradients::default();
    let (mut kl, mut lq, mut lv) = (0.0, 0.0, 0.0);
    for t in batch {
        let (reward, label) = labeled(t)?;
        let v_next = next_value(b, t);
        let mut g = Graph::new();
        let ids = b.planner_ids(&t.history);
        let state = b.planner_state(&mut g, &ids, tr);
        let mut terms = Vec::with_capacity(3);
        if reward > cfg.delta {
            let logits = b.policy_logits(&mut g, state, tr);
            let k = distill_term(&mut g, logits, label);
            kl += value(&g, k) * kl_scale;
            terms.push((k, kl_scale));
        }
        let qrow = b.q_head(&mut g, state, tr);
        let q = q_term(&mut g, qrow, label, cfg.q_input_mode);
        let v = b.v_head(&mut g, state, tr);
        let q_loss = td_term(&mut g, q, reward, v_next, cfg.gamma, t.is_terminal);
        let v_loss = expectile_term(&mut g, q, v, cfg.tau_expectile);
        lq += value(&g, q_loss) * scale;
        lv += value(&g, v_loss) * scale;
        terms.push((q_loss, scale));
        terms.push((v_loss, scale));
        backprop(&g, &terms, &mut grads);
    }
    let report = LossReport { l_kl: Some(kl), l_q: Some(lq), l_v: Some(lv), ..Default::default() }.finish();
    Ok(BatchStep { report, grads })
}

/// Trainable components of Stage 3 under the config's codebook flag.
pub fn stage3_trainable(cfg: &TrainConfig) -> Trainable {
    Trainable {
        planner: true,
        q_head: true,
        v_head: true,
        pformer: true,
        codebook: !cfg.freeze_codebook_after_stage1,
        ..Trainable::NONE
    }
}

/// Advantage-weighted planner and P-Former objectives plus Q/V regression.
pub fn stage3_step<S: Scalar>(
    b: &ModelBundle<S>,
    batch: &[&TrainingTuple],
    cfg: &TrainConfig,
    tr: Trainable,
) -> Result<BatchStep<S>> {
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::default();
    let (mut high, mut low, mut lq, mut lv) = (0.0, 0.0, 0.0, 0.0);
    for t in batch {
        let (reward, label) = labeled(t)?;
        let v_next = next_value(b, t);
        let mut g = Graph::new();
        let ids = b.planner_ids(&t.history);
        let state = b.planner_state(&mut g, &ids, tr);
        let logits = b.policy_logits(&mut g, state, tr);
        let qrow = b.q_head(&mut g, state, tr);
        let q = q_term(&mut g, qrow, label, cfg.q_input_mode);
        let v = b.v_head(&mut g, state, tr);
        let adv = value(&g, q) - value(&g, v);
        let h = awr_term(&mut g, logits, label, advantage_weight(adv, cfg.tau_awr, cfg.exp_clip));
        let w = token_term(&mut g, b, t, label, advantage_weight(adv, 1.0, cfg.exp_clip), tr)?;
        let q_loss = td_term(&mut g, q, reward, v_next, cfg.gamma, t.is_terminal);
        let v_loss = expectile_term(&mut g, q, v, cfg.tau_expectile);
        high += value(&g, h) * scale;
        low += value(&g, w) * scale;
        lq += value(&g, q_loss) * scale;
        lv += value(&g, v_loss) * scale;
        backprop(&g, &[(h, scale), (w, scale), (q_loss, scale), (v_loss, scale)], &mut grads);
    }
    let report = LossReport { l_high: Some(high), l_low: Some(low), l_q: Some(lq), l_v: Some(lv), ..Default::default() }.finish();
    Ok(BatchStep { report, grads })
}

fn run_epochs<S: Scalar>(
    b: &mut ModelBundle<S>,
    tuples: &[TrainingTuple],
    cfg: &TrainConfig,
    stage: TrainStage,
    name: &str,
    opts: RunOptions,
    on_epoch: EpochHook<'_, S>,
    mut step: impl FnMut(&ModelBundle<S>, &[&TrainingTuple]) -> Result<BatchStep<S>>,
) -> Result<StageOutcome> {
    if tuples.is_empty() {
        return Err(Error::Precondition(format!("{name}: no training tuples")));
    }
    let settings = cfg.stage(stage);
    let per_epoch = tuples.len().div_ceil(settings.batch_size);
    let mut total = per_epoch * settings.epochs;
    if let Some(m) = opts.max_steps {
        total = total.min(m);
    }
    let mut opt = Adam::new(settings.learning_rate, total);
    let mut out = StageOutcome::default();
    'epochs: for epoch in 1..=settings.epochs {
        let mut order: Vec<usize> = (0..tuples.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &format!("{name}/epoch{epoch}")));
        for chunk in order.chunks(settings.batch_size) {
            if out.steps >= total {
                break 'epochs;
            }
            let batch: Vec<&TrainingTuple> = chunk.iter().map(|&i| &tuples[i]).collect();
            let BatchStep { report, grads } = step(b, &batch)?;
            let report = LossReport { stage: name.into(), epoch, step: out.steps, lr: opt.current_lr(), ..report };
            if !report.is_finite() || grads.iter().any(|(_, t)| !t.is_finite()) {
                let ids: Vec<String> = batch.iter().map(|t| t.id()).collect();
                return Err(Error::NonFinite { step: out.steps, detail: format!("{report:?} on batch [{}]", ids.join(", ")) });
            }
            opt.step(b, &grads);
            out.steps += 1;
            out.reports.push(report);
        }
        out.epochs_done = epoch;
        let mean = out.reports.iter().filter(|r| r.epoch == epoch).map(|r| r.total).sum::<f64>()
            / out.reports.iter().filter(|r| r.epoch == epoch).count().max(1) as f64;
        info!("{name} epoch {epoch}: mean loss {mean:.4}");
        on_epoch(epoch, b)?;
    }
    Ok(out)
}

/// Trains the generator on plain next-token NLL, then freezes it.
pub fn pretrain_generator<S: Scalar>(
    b: &mut ModelBundle<S>,
    tuples: &[TrainingTuple],
    cfg: &TrainConfig,
    opts: RunOptions,
    on_epoch: EpochHook<'_, S>,
) -> Result<StageOutcome> {
    if b.generator_frozen {
        return Err(Error::Precondition("generator is already frozen".into()));
    }
    let out = run_epochs(b, tuples, cfg, TrainStage::Pretrain, "pretrain", opts, on_epoch, pretrain_step)?;
    b.generator_frozen = true;
    Ok(out)
}

pub fn train_stage1<S: Scalar>(
    b: &mut ModelBundle<S>,
    tuples: &[TrainingTuple],
    cfg: &TrainConfig,
    opts: RunOptions,
    on_epoch: EpochHook<'_, S>,
) -> Result<StageOutcome> {
    if !b.generator_frozen {
        return Err(Error::Precondition("stage 1 needs a pretrained, frozen generator".into()));
    }
    run_epochs(b, tuples, cfg, TrainStage::Stage1, "stage1", opts, on_epoch, stage1_step)
}

fn require_labels(tuples: &[TrainingTuple], k: usize) -> Result<()> {
    for t in tuples {
        let (_, label) = labeled(t)?;
        if label.k() != k {
            return Err(Error::Precondition(format!("tuple {}: label over {} codes, model has {k}", t.id(), label.k())));
        }
    }
    Ok(())
}

pub fn train_stage2<S: Scalar>(
    b: &mut ModelBundle<S>,
    tuples: &[TrainingTuple],
    cfg: &TrainConfig,
    opts: RunOptions,
    on_epoch: EpochHook<'_, S>,
) -> Result<StageOutcome> {
    require_labels(tuples, b.num_codes())?;
    run_epochs(b, tuples, cfg, TrainStage::Stage2, "stage2", opts, on_epoch, |b, batch| stage2_step(b, batch, cfg))
}

pub fn train_stage3<S: Scalar>(
    b: &mut ModelBundle<S>,
    tuples: &[TrainingTuple],
    cfg: &TrainConfig,
    opts: RunOptions,
    on_epoch: EpochHook<'_, S>,
) -> Result<StageOutcome> {
    require_labels(tuples, b.num_codes())?;
    let tr = stage3_trainable(cfg);
    run_epochs(b, tuples, cfg, TrainStage::Stage3, "stage3", opts, on_epoch, |b, batch| stage3_step(b, batch, cfg, tr))
}

/// Labels every tuple with the encoder's distribution over its system utterance.
pub fn pseudo_label<S: Scalar>(b: &ModelBundle<S>, tuples: &[TrainingTuple]) -> Vec<TrainingTuple> {
    tuples
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.pseudo_label = Some(b.encode_utterance(&t.sys_utterance));
            t
        })
        .collect()
}

/// Stage a checkpoint must come from before `target` may start.
pub fn check_stage_order(parent: &StageManifest, target: Stage, skip_stage2: bool) -> Result<()> {
    let required = match target {
        Stage::Init | Stage::GeneratorPretrain => Stage::Init,
        Stage::Stage1 => Stage::GeneratorPretrain,
        Stage::Stage2 => Stage::Stage1,
        Stage::Stage3 if skip_stage2 => Stage::Stage1,
        Stage::Stage3 => Stage::Stage2,
    };
    if parent.stage != required {
        let hint = if target == Stage::Stage3 && !skip_stage2 { " (pass --skip-stage2 to start from stage 1)" } else { "" };
        return Err(Error::Precondition(format!(
            "stage manifest check: {} needs a {} checkpoint, found {}{hint}",
            target.name(),
            required.name(),
            parent.stage.name()
        )));
    }
    Ok(())
}
