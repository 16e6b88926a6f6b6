//! Training objectives and the answer-confidence read-out.
//!
//! Graph-building functions take a `[batch, n_answers]` logits node and a
//! [`TargetBatch`]; scalar helpers at the bottom mirror them in plain `f64`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::data::Instance;
use crate::error::{Error, Result};

pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Softmax cross-entropy on the primary answer.
    Ce,
    /// Per-answer sigmoid with soft targets.
    Ml,
}

impl FromStr for Head {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ce" => Ok(Head::Ce),
            "ml" => Ok(Head::Ml),
            _ => Err(format!("unknown head `{s}` (expected ce or ml)")),
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Ce => "ce",
            Head::Ml => "ml",
        })
    }
}

/// How the ml head turns soft targets into one confidence value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceRule {
    /// `sum_a t_a * sigmoid(z_a)`
    TargetWeighted,
    /// `sigmoid(z)` at the primary answer only.
    Primary,
}

impl FromStr for ConfidenceRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "target-weighted" => Ok(ConfidenceRule::TargetWeighted),
            "primary" => Ok(ConfidenceRule::Primary),
            _ => Err(format!(
                "unknown confidence rule `{s}` (expected target-weighted or primary)"
            )),
        }
    }
}

impl fmt::Display for ConfidenceRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConfidenceRule::TargetWeighted => "target-weighted",
            ConfidenceRule::Primary => "primary",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub head: Head,
    pub alpha: f64,
    pub log_clamp: f64,
    pub confidence: ConfidenceRule,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            head: Head::Ml,
            alpha: 3.0,
            log_clamp: LOG_CLAMP,
            confidence: ConfidenceRule::TargetWeighted,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(
                "loss config",
                format!("alpha must be finite and >= 0, got {}", self.alpha),
            ));
        }
        if !(self.log_clamp > 0.0 && self.log_clamp < 1.0) {
            return Err(Error::invalid("loss config", "log_clamp must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Soft answer scores for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerTargets {
    pub t: Vec<f64>,
    pub primary_answer: usize,
}

/// `t_a = votes(a) / vote_count`; the primary answer is the most voted,
/// ties to the lowest id.
pub fn soft_targets(votes: &[(usize, u32)], vote_count: u32, n_answers: usize) -> Result<AnswerTargets> {
    let total: u64 = votes.iter().map(|&(_, c)| u64::from(c)).sum();
    if vote_count == 0 || total == 0 {
        return Err(Error::invalid("votes", "zero total votes"));
    }
    if total != u64::from(vote_count) {
        return Err(Error::invalid(
            "votes",
            format!("votes sum to {total}, expected {vote_count}"),
        ));
    }
    let mut t = vec![0.0; n_answers];
    let mut best: Option<(usize, u32)> = None;
    for &(a, c) in votes {
        if a >= n_answers {
            return Err(Error::invalid(
                "votes",
                format!("answer id {a} outside {n_answers} answers"),
            ));
        }
        if c == 0 {
            return Err(Error::invalid("votes", format!("answer {a} listed with zero votes")));
        }
        t[a] += f64::from(c) / f64::from(vote_count);
        if best.is_none_or(|(ba, bc)| c > bc || (c == bc && a < ba)) {
            best = Some((a, c));
        }
    }
    Ok(AnswerTargets {
        t,
        primary_answer: best.expect("votes non-empty").0,
    })
}

/// Targets for a batch, laid out to match a `[batch, n_answers]` logits node.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBatch {
    n_answers: usize,
    soft: Vec<f64>,
    one_hot: Vec<f64>,
    primary: Vec<usize>,
}

impl TargetBatch {
    pub fn new(targets: &[AnswerTargets]) -> Result<Self> {
        let n_answers = targets.first().map_or(0, |t| t.t.len());
        if targets.is_empty() || n_answers == 0 {
            return Err(Error::invalid("targets", "empty batch"));
        }
        let mut soft = Vec::with_capacity(targets.len() * n_answers);
        let mut one_hot = vec![0.0; targets.len() * n_answers];
        let mut primary = Vec::with_capacity(targets.len());
        for (i, t) in targets.iter().enumerate() {
            if t.t.len() != n_answers || t.primary_answer >= n_answers {
                return Err(Error::invalid("targets", "inconsistent answer-space width"));
            }
            soft.extend_from_slice(&t.t);
            one_hot[i * n_answers + t.primary_answer] = 1.0;
            primary.push(t.primary_answer);
        }
        Ok(TargetBatch {
            n_answers,
            soft,
            one_hot,
            primary,
        })
    }

    pub fn from_instances(instances: &[&Instance], n_answers: usize) -> Result<Self> {
        let targets = instances
            .iter()
            .map(|i| {
                let total = i.votes.iter().map(|&(_, c)| c).sum();
                soft_targets(&i.votes, total, n_answers)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(&targets)
    }

    pub fn len(&self) -> usize {
        self.primary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primary.is_empty()
    }

    pub fn n_answers(&self) -> usize {
        self.n_answers
    }

    pub fn primary(&self) -> &[usize] {
        &self.primary
    }

    pub fn soft_row(&self, i: usize) -> &[f64] {
        &self.soft[i * self.n_answers..(i + 1) * self.n_answers]
    }

    fn soft_node(&self, g: &mut Graph) -> NodeId {
        g.constant(Tensor::from_parts(vec![self.len(), self.n_answers], self.soft.clone()))
    }

    fn one_hot_node(&self, g: &mut Graph) -> NodeId {
        g.constant(Tensor::from_parts(
            vec![self.len(), self.n_answers],
            self.one_hot.clone(),
        ))
    }

    fn check(&self, g: &Graph, logits: NodeId) -> Result<()> {
        let shape = g.value(logits)?.shape();
        if shape != [self.len(), self.n_answers] {
            return Err(Error::Shape {
                op: "loss",
                shapes: vec![shape.to_vec(), vec![self.len(), self.n_answers]],
            });
        }
        Ok(())
    }
}

fn clamped_log(g: &mut Graph, x: NodeId, clamp: f64) -> Result<NodeId> {
    let c = g.clamp_min(x, clamp)?;
    g.log(c)
}

/// `-(1/N) sum_i log softmax(z_i)[primary_i]`
pub fn vqa_ce(g: &mut Graph, logits: NodeId, targets: &TargetBatch, clamp: f64) -> Result<NodeId> {
    targets.check(g, logits)?;
    let p = g.softmax(logits)?;
    let lp = clamped_log(g, p, clamp)?;
    let mask = targets.one_hot_node(g);
    let picked = g.mul(lp, mask)?;
    let rows = g.sum(picked, 1)?;
    let m = g.mean_all(rows)?;
    g.scale(m, -1.0)
}

/// Binary cross-entropy per answer against soft targets, summed over
/// answers and averaged over the batch.
pub fn vqa_ml(g: &mut Graph, logits: NodeId, targets: &TargetBatch, clamp: f64) -> Result<NodeId> {
    targets.check(g, logits)?;
    let pos = g.sigmoid(logits)?;
    let neg_logits = g.scale(logits, -1.0)?;
    // 1 - sigmoid(z) computed as sigmoid(-z) to keep precision near saturation.
    let neg = g.sigmoid(neg_logits)?;
    let log_pos = clamped_log(g, pos, clamp)?;
    let log_neg = clamped_log(g, neg, clamp)?;
    let t = targets.soft_node(g);
    let one_minus_t = g.constant(Tensor::from_parts(
        vec![targets.len(), targets.n_answers],
        targets.soft.iter().map(|v| 1.0 - v).collect(),
    ));
    let a = g.mul(t, log_pos)?;
    let b = g.mul(one_minus_t, log_neg)?;
    let both = g.add(a, b)?;
    let rows = g.sum(both, 1)?;
    let m = g.mean_all(rows)?;
    g.scale(m, -1.0)
}

pub fn vqa_loss(g: &mut Graph, logits: NodeId, targets: &TargetBatch, cfg: &LossConfig) -> Result<NodeId> {
    match cfg.head {
        Head::Ce => vqa_ce(g, logits, targets, cfg.log_clamp),
        Head::Ml => vqa_ml(g, logits, targets, cfg.log_clamp),
    }
}

/// Per-row confidence `[batch]` that the question is answered by its image.
pub fn answer_confidence(
    g: &mut Graph,
    logits: NodeId,
    targets: &TargetBatch,
    head: Head,
    rule: ConfidenceRule,
) -> Result<NodeId> {
    targets.check(g, logits)?;
    let (probs, weights) = match (head, rule) {
        (Head::Ce, _) => (g.softmax(logits)?, targets.one_hot_node(g)),
        (Head::Ml, ConfidenceRule::TargetWeighted) => (g.sigmoid(logits)?, targets.soft_node(g)),
        (Head::Ml, ConfidenceRule::Primary) => (g.sigmoid(logits)?, targets.one_hot_node(g)),
    };
    let w = g.mul(probs, weights)?;
    g.sum(w, 1)
}

/// Mean confidence over a batch of irrelevant pairs.
pub fn qd_loss(g: &mut Graph, logits: NodeId, targets: &TargetBatch, cfg: &LossConfig) -> Result<NodeId> {
    let conf = answer_confidence(g, logits, targets, cfg.head, cfg.confidence)?;
    g.mean_all(conf)
}

/// `l_vqa + alpha * l_qd` as a graph node.
pub fn self_loss_node(g: &mut Graph, l_vqa: NodeId, l_qd: NodeId, alpha: f64) -> Result<NodeId> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha", format!("must be finite and >= 0, got {alpha}")));
    }
    let weighted = g.scale(l_qd, alpha)?;
    g.add(l_vqa, weighted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_vqa: f64,
    pub l_qd: f64,
    pub l_self: f64,
    /// Mean confidence on relevant pairs.
    pub relevant_conf: f64,
    /// Mean confidence on irrelevant pairs.
    pub irrelevant_conf: f64,
}

/// Combines already-evaluated components. Confidence fields are left at
/// NaN for the caller to fill.
pub fn self_loss(l_vqa: f64, l_qd: f64, alpha: f64) -> Result<LossReport> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha", format!("must be finite and >= 0, got {alpha}")));
    }
    Ok(LossReport {
        l_vqa,
        l_qd,
        l_self: l_vqa + alpha * l_qd,
        relevant_conf: f64::NAN,
        irrelevant_conf: f64::NAN,
    })
}

/// Confidence of one logits row without a graph.
pub fn confidence_of(logits: &[f64], targets: &AnswerTargets, head: Head, rule: ConfidenceRule) -> f64 {
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    match (head, rule) {
        (Head::Ce, _) => {
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|z| (z - m).exp()).sum();
            (logits[targets.primary_answer] - m).exp() / denom
        }
        (Head::Ml, ConfidenceRule::TargetWeighted) => {
            logits.iter().zip(&targets.t).map(|(&z, &t)| t * sigmoid(z)).sum()
        }
        (Head::Ml, ConfidenceRule::Primary) => sigmoid(logits[targets.primary_answer]),
    }
}
