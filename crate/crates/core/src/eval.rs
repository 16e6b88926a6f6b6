//! Accuracy with a per-question-type breakdown, and the prior probe: mean
//! answer confidence when questions are shown someone else's image.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Instance, QType};
use crate::error::{Error, Result};
use crate::losses::{confidence_of, soft_targets, ConfidenceRule, Head};
use crate::model::{predict_logits, predict_pairs, Params};
use crate::rng::{stream_rng, Stream};

/// Votes at which an answer earns full credit.
pub const FULL_CREDIT_VOTES: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_acc: f64,
    pub per_type_acc: BTreeMap<QType, f64>,
    pub per_type_count: BTreeMap<QType, usize>,
    pub per_template_acc: BTreeMap<usize, f64>,
    pub n_evaluated: usize,
    pub prior_confidence: Option<f64>,
}

/// `min(1, votes(answer) / 3)`
pub fn vqa_score(instance: &Instance, answer: usize) -> f64 {
    f64::from(instance.votes_for(answer).min(FULL_CREDIT_VOTES)) / f64::from(FULL_CREDIT_VOTES)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Scores given predictions. Used directly by the trainer and by [`accuracy`].
pub fn score_predictions(instances: &[&Instance], predictions: &[usize]) -> Result<MetricsReport> {
    if instances.is_empty() {
        return Err(Error::invalid("evaluation", "no instances to score"));
    }
    if instances.len() != predictions.len() {
        return Err(Error::invalid("evaluation", "one prediction per instance required"));
    }
    let mut total = 0.0;
    let mut by_type: BTreeMap<QType, (f64, usize)> = BTreeMap::new();
    let mut by_template: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (inst, &pred) in instances.iter().zip(predictions) {
        let s = vqa_score(inst, pred);
        total += s;
        let e = by_type.entry(inst.qtype).or_default();
        e.0 += s;
        e.1 += 1;
        let e = by_template.entry(inst.template_id).or_default();
        e.0 += s;
        e.1 += 1;
    }
    Ok(MetricsReport {
        overall_acc: total / instances.len() as f64,
        per_type_acc: by_type.iter().map(|(&k, &(s, n))| (k, s / n as f64)).collect(),
        per_type_count: by_type.iter().map(|(&k, &(_, n))| (k, n)).collect(),
        per_template_acc: by_template.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        n_evaluated: instances.len(),
        prior_confidence: None,
    })
}

/// Inference-mode accuracy; `prior_confidence` is left unset.
pub fn accuracy(params: &Params, instances: &[&Instance]) -> Result<MetricsReport> {
    if instances.is_empty() {
        return Err(Error::invalid("evaluation", "no instances to score"));
    }
    let logits = predict_logits(params, instances)?;
    let preds: Vec<usize> = logits.iter().map(|r| argmax(r)).collect();
    score_predictions(instances, &preds)
}

/// Settings for [`prior_probe`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub head: Head,
    pub rule: ConfidenceRule,
    pub seed: u64,
    /// `None` probes one pair per instance.
    pub n_pairs: Option<usize>,
}

/// Pair `k` uses question `k mod n` and an image drawn uniformly from the
/// other instances with its own seeded stream.
pub fn probe_pairs(n: usize, n_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    (0..n_pairs)
        .map(|k| {
            let i = k % n;
            let mut rng = stream_rng(seed, Stream::Probe, k as u64);
            let j = rng.random_range(0..n - 1);
            (i, if j >= i { j + 1 } else { j })
        })
        .collect()
}

/// Mean answer confidence over mismatched question/image pairs.
pub fn prior_probe(params: &Params, instances: &[&Instance], cfg: &ProbeConfig) -> Result<f64> {
    let n = instances.len();
    if n < 2 {
        return Err(Error::invalid("prior probe", "needs at least 2 instances"));
    }
    let n_pairs = cfg.n_pairs.unwrap_or(n);
    if n_pairs == 0 {
        return Err(Error::invalid("prior probe", "n_pairs must be positive"));
    }
    let pairs = probe_pairs(n, n_pairs, cfg.seed);
    let qs: Vec<&Instance> = pairs.iter().map(|&(i, _)| instances[i]).collect();
    let imgs: Vec<&Instance> = pairs.iter().map(|&(_, j)| instances[j]).collect();
    let logits = predict_pairs(params, &qs, &imgs)?;
    let mut sum = 0.0;
    for (q, row) in qs.iter().zip(&logits) {
        let total = q.votes.iter().map(|&(_, c)| c).sum();
        let t = soft_targets(&q.votes, total, params.spec.n_answers)?;
        sum += confidence_of(row, &t, cfg.head, cfg.rule);
    }
    Ok(sum / n_pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub overall_delta: f64,
    pub per_type_delta: BTreeMap<QType, f64>,
    pub prior_confidence_delta: Option<f64>,
    pub n_evaluated: usize,
    /// `"+"`, `"-"` or `"="` per column, in table order.
    pub signs: Vec<(String, String)>,
}

fn sign(d: f64) -> String {
    if d > 0.0 {
        "+".into()
    } else if d < 0.0 {
        "-".into()
    } else {
        "=".into()
    }
}

/// Column-wise `b - a`.
pub fn compare(a: &MetricsReport, b: &MetricsReport) -> Result<ComparisonRecord> {
    if a.n_evaluated != b.n_evaluated {
        return Err(Error::invalid(
            "comparison",
            format!("reports cover {} and {} instances", a.n_evaluated, b.n_evaluated),
        ));
    }
    let per_type_delta: BTreeMap<QType, f64> = QType::ALL
        .iter()
        .filter_map(|t| Some((*t, b.per_type_acc.get(t)? - a.per_type_acc.get(t)?)))
        .collect();
    let overall_delta = b.overall_acc - a.overall_acc;
    let prior_confidence_delta = match (a.prior_confidence, b.prior_confidence) {
        (Some(x), Some(y)) => Some(y - x),
        _ => None,
    };
    let mut signs: Vec<(String, String)> = per_type_delta.iter().map(|(t, d)| (t.to_string(), sign(*d))).collect();
    signs.push(("overall".into(), sign(overall_delta)));
    if let Some(d) = prior_confidence_delta {
        signs.push(("prior".into(), sign(d)));
    }
    Ok(ComparisonRecord {
        overall_delta,
        per_type_delta,
        prior_confidence_delta,
        n_evaluated: a.n_evaluated,
        signs,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

/// Aligned text table, one row per named report, accuracies in percent.
pub fn render_table(rows: &[(&str, &MetricsReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}\n",
        "model", "Yes/No", "Num", "Other", "Overall", "Prior"
    );
    for (name, r) in rows {
        let t = |q| pct(r.per_type_acc.get(&q).copied());
        writeln!(
            out,
            "{name:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
            t(QType::YesNo),
            t(QType::Num),
            t(QType::Other),
            pct(Some(r.overall_acc)),
            pct(r.prior_confidence)
        )
        .unwrap();
    }
    out
}
