//! Two-phase optimization: pretraining on the answering loss, then
//! fine-tuning on the answering loss plus the question-dependency term.
//!
//! Each phase starts a fresh Adam state and restarts the learning-rate
//! schedule at epoch 0. Shuffling and pair sampling draw from streams keyed
//! by the global epoch index, so a phase run on its own reproduces the same
//! batches it would see inside a longer run.

mod adam;

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};

use crate::autodiff::{grad_check, GradCheckReport, Graph, NodeId};
use crate::data::{Dataset, Image, Instance};
use crate::error::{Error, Result};
use crate::eval::{argmax, vqa_score};
use crate::losses::{answer_confidence, self_loss_node, vqa_loss, LossConfig, TargetBatch};
use crate::model::{forward_batch, Bound, Mode, Params};
use crate::rng::{stream_rng, Stream};
use crate::sampler::{self, AlikeFn, PairMode, PairedBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// First phase-local epoch that runs at half the base rate.
    pub lr_halving_start: usize,
    pub lr_halving_period: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub pair_mode: PairMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 10,
            finetune_epochs: 15,
            batch_size: 64,
            base_lr: 0.001,
            lr_halving_start: 10,
            lr_halving_period: 5,
            seed: 0,
            shuffle: true,
            pair_mode: PairMode::Faithful,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("train config", "batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("train config", "base_lr must be positive and finite"));
        }
        if self.lr_halving_period == 0 {
            return Err(Error::invalid("train config", "lr_halving_period must be at least 1"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.pretrain_epochs + self.finetune_epochs
    }
}

/// Base rate before `lr_halving_start`, halved at the start epoch and again
/// every `lr_halving_period` epochs after it.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.lr_halving_start {
        return cfg.base_lr;
    }
    let halvings = 1 + (epoch - cfg.lr_halving_start) / cfg.lr_halving_period;
    cfg.base_lr / 2f64.powi(halvings as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Answering loss only.
    Vqa,
    /// Answering loss plus `alpha` times the question-dependency loss.
    SelfSupervised,
}

/// One epoch of a phase. Loss fields are batch-size-weighted means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub lr: f64,
    pub l_vqa: f64,
    pub l_qd: Option<f64>,
    pub l_self: f64,
    pub train_acc: f64,
    pub irrelevant_conf: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(i + 1, None, e.to_string())))
            .collect::<Result<_>>()?;
        Ok(TrainHistory { records })
    }

    pub fn extend(&mut self, other: TrainHistory) {
        self.records.extend(other.records);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhasePlan {
    pub phase: Phase,
    pub objective: Objective,
    pub epochs: usize,
    /// Global index of the phase's first epoch; keys the shuffle and pair streams.
    pub first_epoch: usize,
}

/// Batch index lists for one epoch. A trailing batch of one is merged
/// into the batch before it, since batch statistics and pair sampling
/// need at least two members.
pub fn epoch_batches(n: usize, cfg: &TrainConfig, global_epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        let mut rng = stream_rng(cfg.seed, Stream::Shuffle, global_epoch as u64);
        order.shuffle(&mut rng);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

struct StepOutcome {
    l_vqa: f64,
    l_qd: Option<f64>,
    l_self: f64,
    score: f64,
}

/// Nodes of one training objective built on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub logits: NodeId,
    pub batch_norm: Option<NodeId>,
    pub l_vqa: NodeId,
    pub l_qd: Option<NodeId>,
    pub total: NodeId,
}

/// Builds the answering loss on `batch`, plus the question-dependency term
/// over `pairs` when given. The irrelevant forward pass uses train-mode
/// batch norm; only the relevant pass's statistics are reported.
pub fn build_loss(
    g: &mut Graph,
    bound: &Bound,
    batch: &[&Instance],
    targets: &TargetBatch,
    loss: &LossConfig,
    pairs: Option<&PairedBatch>,
) -> Result<LossNodes> {
    let tokens: Vec<&[u32]> = batch.iter().map(|i| i.tokens.as_slice()).collect();
    let images: Vec<&Image> = batch.iter().map(|i| &i.image).collect();
    let fwd = forward_batch(g, bound, &tokens, &images, Mode::Train)?;
    let l_vqa = vqa_loss(g, fwd.logits, targets, loss)?;
    let (total, l_qd) = match pairs {
        None => (l_vqa, None),
        Some(pairs) => {
            let irr_images: Vec<&Image> = pairs.irrelevant.iter().map(|p| &batch[p.image].image).collect();
            let irr = forward_batch(g, bound, &tokens, &irr_images, Mode::Train)?;
            let conf = answer_confidence(g, irr.logits, targets, loss.head, loss.confidence)?;
            let l_qd = g.mean_all(conf)?;
            (self_loss_node(g, l_vqa, l_qd, loss.alpha)?, Some(l_qd))
        }
    };
    Ok(LossNodes {
        logits: fwd.logits,
        batch_norm: fwd.batch_norm,
        l_vqa,
        l_qd,
        total,
    })
}

/// Finite-difference check of the full training objective's gradient with
/// respect to every weight.
pub fn grad_check_loss(
    params: &Params,
    batch: &[&Instance],
    loss: &LossConfig,
    pairs: Option<&PairedBatch>,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let targets = TargetBatch::from_instances(batch, params.spec.n_answers)?;
    grad_check(&params.weights, epsilon, |g, w| {
        let p = params.with_weights(w.clone());
        let bound = Bound::new(g, &p);
        Ok(build_loss(g, &bound, batch, &targets, loss, pairs)?.total)
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut Params,
    adam: &mut AdamState,
    batch: &[&Instance],
    loss: &LossConfig,
    cfg: &TrainConfig,
    objective: Objective,
    pair_stream: u64,
    alike: Option<&AlikeFn>,
    lr: f64,
) -> Result<StepOutcome> {
    let n_answers = params.spec.n_answers;
    let targets = TargetBatch::from_instances(batch, n_answers)?;
    let pairs = match objective {
        Objective::Vqa => None,
        Objective::SelfSupervised => {
            let mut rng = stream_rng(cfg.seed, Stream::Pairs, pair_stream);
            Some(sampler::build(batch, &mut rng, cfg.pair_mode, alike)?)
        }
    };

    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params);
    let nodes = build_loss(&mut g, &bound, batch, &targets, loss, pairs.as_ref())?;

    let logits = g.value(nodes.logits)?.data().to_vec();
    let score: f64 = logits
        .chunks(n_answers)
        .zip(batch)
        .map(|(row, inst)| vqa_score(inst, argmax(row)))
        .sum();
    let stats = match nodes.batch_norm {
        Some(id) => g.batch_stats(id)?.map(|(m, v)| (m.to_vec(), v.to_vec())),
        None => None,
    };
    let l_vqa = g.value(nodes.l_vqa)?.item();
    let l_qd = nodes.l_qd.map(|id| g.value(id).map(|t| t.item())).transpose()?;
    let l_self = g.value(nodes.total)?.item();
    let grads = g.backward(nodes.total)?;
    drop(bound);

    adam_step(&mut params.weights, &grads, adam, lr)?;
    if let Some((mean, var)) = stats {
        params.update_running_stats(&mean, &var, batch.len());
    }
    Ok(StepOutcome {
        l_vqa,
        l_qd,
        l_self,
        score,
    })
}

/// Runs one phase from `params` with a fresh optimizer state.
pub fn run_phase(
    cfg: &TrainConfig,
    loss: &LossConfig,
    data: &Dataset,
    params: &Params,
    plan: PhasePlan,
    alike: Option<&AlikeFn>,
) -> Result<(Params, TrainHistory)> {
    run_phase_observed(cfg, loss, data, params, plan, alike, &mut |_, _| {})
}

/// [`run_phase`] with a callback after every epoch.
pub fn run_phase_observed(
    cfg: &TrainConfig,
    loss: &LossConfig,
    data: &Dataset,
    params: &Params,
    plan: PhasePlan,
    alike: Option<&AlikeFn>,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Params),
) -> Result<(Params, TrainHistory)> {
    cfg.validate()?;
    loss.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("training data", "train split is empty"));
    }
    if plan.objective == Objective::SelfSupervised && (cfg.batch_size < 2 || data.train.len() < 2) {
        return Err(Error::invalid(
            "train config",
            "fine-tuning needs batches of at least 2",
        ));
    }
    if params.spec.n_answers != data.n_answers() {
        return Err(Error::invalid(
            "params",
            format!(
                "model has {} answers, dataset {}",
                params.spec.n_answers,
                data.n_answers()
            ),
        ));
    }
    let mut params = params.clone();
    let mut adam = AdamState::new();
    let mut history = TrainHistory::default();
    let n = data.train.len() as f64;
    for epoch in 0..plan.epochs {
        let global = plan.first_epoch + epoch;
        let lr = lr_at(epoch, cfg);
        let (mut l_vqa, mut l_qd, mut l_self, mut score) = (0.0, 0.0, 0.0, 0.0);
        for (b, idx) in epoch_batches(data.train.len(), cfg, global).iter().enumerate() {
            let batch: Vec<&Instance> = idx.iter().map(|&i| &data.train[i]).collect();
            let pair_stream = ((global as u64) << 32) | b as u64;
            let out = train_step(
                &mut params,
                &mut adam,
                &batch,
                loss,
                cfg,
                plan.objective,
                pair_stream,
                alike,
                lr,
            )?;
            let w = batch.len() as f64;
            l_vqa += w * out.l_vqa;
            l_qd += w * out.l_qd.unwrap_or(0.0);
            l_self += w * out.l_self;
            score += out.score;
        }
        // The question-dependency loss is the mean irrelevant-pair confidence.
        let qd = (plan.objective == Objective::SelfSupervised).then_some(l_qd / n);
        history.records.push(EpochRecord {
            phase: plan.phase,
            epoch,
            lr,
            l_vqa: l_vqa / n,
            l_qd: qd,
            l_self: l_self / n,
            train_acc: score / n,
            irrelevant_conf: qd,
        });
        on_epoch(history.records.last().expect("just pushed"), &params);
    }
    Ok((params, history))
}

pub fn pretrain(
    cfg: &TrainConfig,
    loss: &LossConfig,
    data: &Dataset,
    params: &Params,
) -> Result<(Params, TrainHistory)> {
    let plan = PhasePlan {
        phase: Phase::Pretrain,
        objective: Objective::Vqa,
        epochs: cfg.pretrain_epochs,
        first_epoch: 0,
    };
    run_phase(cfg, loss, data, params, plan, None)
}

pub fn finetune(
    cfg: &TrainConfig,
    loss: &LossConfig,
    data: &Dataset,
    params: &Params,
    alike: Option<&AlikeFn>,
) -> Result<(Params, TrainHistory)> {
    let plan = PhasePlan {
        phase: Phase::Finetune,
        objective: Objective::SelfSupervised,
        epochs: cfg.finetune_epochs,
        first_epoch: cfg.pretrain_epochs,
    };
    run_phase(cfg, loss, data, params, plan, alike)
}

/// The fine-tuning phase with the question-dependency term removed: same
/// batches, same schedule, same fresh optimizer.
pub fn continue_vqa(
    cfg: &TrainConfig,
    loss: &LossConfig,
    data: &Dataset,
    params: &Params,
) -> Result<(Params, TrainHistory)> {
    let plan = PhasePlan {
        phase: Phase::Finetune,
        objective: Objective::Vqa,
        epochs: cfg.finetune_epochs,
        first_epoch: cfg.pretrain_epochs,
    };
    run_phase(cfg, loss, data, params, plan, None)
}

/// Answering loss only, for the full pretrain + finetune epoch budget.
pub fn train_baseline(
    cfg: &TrainConfig,
    loss: &LossConfig,
    data: &Dataset,
    params: &Params,
) -> Result<(Params, TrainHistory)> {
    let plan = PhasePlan {
        phase: Phase::Pretrain,
        objective: Objective::Vqa,
        epochs: cfg.total_epochs(),
        first_epoch: 0,
    };
    run_phase(cfg, loss, data, params, plan, None)
}

/// Pretraining followed by self-supervised fine-tuning.
pub fn train_ssl(
    cfg: &TrainConfig,
    loss: &LossConfig,
    data: &Dataset,
    params: &Params,
    alike: Option<&AlikeFn>,
) -> Result<(Params, TrainHistory)> {
    let (pre, mut history) = pretrain(cfg, loss, data, params)?;
    let (fine, h2) = finetune(cfg, loss, data, &pre, alike)?;
    history.extend(h2);
    Ok((fine, history))
}

#[cfg(test)]
mod tests;
