//! Threshold and ranking metrics for defect prediction.

use serde::{Deserialize, Serialize};

use crate::corpus::CodeCommit;
use crate::error::{Error, Result};

/// Precision, recall and F1 from confusion counts. Any ratio with a zero
/// denominator is reported as 0.
pub fn f1_score(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Area under the ROC curve via the Mann-Whitney statistic: the probability
/// that a random positive outranks a random negative, ties counting half.
pub fn auc_score(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::invalid(format!(
            "{} labels but {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::invalid("AUC undefined: test set contains a single class"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        positive_rank_sum += rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_predictions(labels: &[u8], predicted: &[u8]) -> Self {
        let mut c = Self::default();
        for (&y, &p) in labels.iter().zip(predicted) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc: f64,
    pub threshold: f64,
    pub confusion: Confusion,
    pub n_examples: usize,
    pub model_id: String,
}

/// Anything that maps commits to defect probabilities.
pub trait Scorer {
    fn score(&self, commits: &[CodeCommit]) -> Result<Vec<f64>>;
    fn id(&self) -> String;
}

/// Metrics for already-computed scores.
pub fn report_from_scores(labels: &[u8], scores: &[f64], threshold: f64, model_id: String) -> Result<EvalReport> {
    let auc = auc_score(labels, scores)?;
    let predicted: Vec<u8> = scores.iter().map(|&s| u8::from(s >= threshold)).collect();
    let confusion = Confusion::from_predictions(labels, &predicted);
    let (precision, recall, f1) = f1_score(confusion.tp, confusion.fp, confusion.fn_);
    Ok(EvalReport {
        f1,
        precision,
        recall,
        auc,
        threshold,
        confusion,
        n_examples: labels.len(),
        model_id,
    })
}

/// Scores `test` with `model` and reports F1 at `threshold` plus AUC.
pub fn evaluate_model<S: Scorer + ?Sized>(model: &S, test: &[CodeCommit], threshold: f64) -> Result<(EvalReport, Vec<f64>)> {
    if test.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let scores = model.score(test)?;
    let labels: Vec<u8> = test.iter().map(|c| c.label).collect();
    let report = report_from_scores(&labels, &scores, threshold, model.id())?;
    Ok((report, scores))
}
