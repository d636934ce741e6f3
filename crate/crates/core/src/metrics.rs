//! Ranking and classification metrics for root-cause evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pooled confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Counts predictions `score >= threshold` against binary labels.
    pub fn from_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Swaps the roles of the positive and negative class.
    pub fn swapped(&self) -> Self {
        Confusion {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Precision, recall, F1 and MCC; a zero denominator yields 0.
pub fn confusion_metrics(c: &Confusion) -> ConfusionMetrics {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    ConfusionMetrics {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
        mcc: ratio(tp * tn - fp * fn_, den),
    }
}

/// Mean reciprocal rank from 1-based ranks of the true cause.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::UndefinedMetric("MRR of zero incidents".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Invalid("ranks are 1-based".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// 1-based position of `truth` when candidates are sorted by descending
/// score, ties broken by ascending `keys`.
pub fn rank_of<K: Ord>(scores: &[f64], keys: &[K], truth: usize) -> usize {
    let order = ranking(scores, keys);
    order.iter().position(|&i| i == truth).expect("truth in range") + 1
}

/// Candidate indices sorted by descending score, ties broken by `keys`.
pub fn ranking<K: Ord>(scores: &[f64], keys: &[K]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| keys[a].cmp(&keys[b]))
    });
    idx
}

/// Area under the ROC curve as the Mann–Whitney statistic
/// `(wins + ties / 2) / (n_pos · n_neg)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tie groups, then the rank-sum form of U.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(u / (np * nn))
}

/// Scored candidates of one incident.
#[derive(Clone, Debug, PartialEq)]
pub struct IncidentScores {
    /// Predicted probability per candidate.
    pub probs: Vec<f64>,
    /// Raw scores used for ranking.
    pub scores: Vec<f64>,
    /// Tie-break key per candidate: (service id, fault id).
    pub keys: Vec<(usize, usize)>,
    pub truth: usize,
    pub fault_type: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub mcc: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub mrr: f64,
    pub n_incidents: usize,
}

/// Evaluation report written by the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub mcc: f64,
    pub auc: Option<f64>,
    pub mrr: f64,
    pub n_incidents: usize,
    pub per_fault_type: BTreeMap<String, MetricSummary>,
}

/// Decision threshold on predicted probabilities.
pub const THRESHOLD: f64 = 0.5;

pub fn summarize(incidents: &[&IncidentScores]) -> Result<MetricSummary> {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut ranks = Vec::new();
    for inc in incidents {
        probs.extend_from_slice(&inc.probs);
        labels.extend((0..inc.probs.len()).map(|k| k == inc.truth));
        ranks.push(rank_of(&inc.scores, &inc.keys, inc.truth));
    }
    let cm = confusion_metrics(&Confusion::from_scores(&probs, &labels, THRESHOLD));
    let auc = match auc(&probs, &labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricSummary {
        f1: cm.f1,
        precision: cm.precision,
        recall: cm.recall,
        mcc: cm.mcc,
        auc,
        mrr: mrr(&ranks)?,
        n_incidents: incidents.len(),
    })
}

pub fn evaluate(incidents: &[IncidentScores]) -> Result<EvalReport> {
    let all: Vec<&IncidentScores> = incidents.iter().collect();
    let overall = summarize(&all)?;
    let mut groups: BTreeMap<String, Vec<&IncidentScores>> = BTreeMap::new();
    for inc in incidents {
        groups.entry(inc.fault_type.clone()).or_default().push(inc);
    }
    let per_fault_type = groups
        .into_iter()
        .map(|(k, v)| summarize(&v).map(|s| (k, s)))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        f1: overall.f1,
        precision: overall.precision,
        recall: overall.recall,
        mcc: overall.mcc,
        auc: overall.auc,
        mrr: overall.mrr,
        n_incidents: overall.n_incidents,
        per_fault_type,
    })
}
