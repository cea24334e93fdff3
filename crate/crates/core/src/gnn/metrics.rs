//! Ranking metrics for binary classification.

use ndarray::Array2;

use crate::error::{invalid, Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("NaN score"));
    }
    Ok(())
}

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Mann-Whitney U with mid-ranks for tied scores.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: `sum_k (R_k - R_{k-1}) P_k` over descending score
/// thresholds, with tied scores forming one threshold.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs a positive label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&k| labels[k]).count();
        seen += j - i + 1;
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Which ranking metric measures prediction quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityMetric {
    Auroc,
    Ap,
}

/// Mean of the per-task metric over tasks where it is defined.
pub fn multitask_quality(
    logits: &Array2<f64>,
    labels: &Array2<f64>,
    metric: QualityMetric,
) -> Result<f64> {
    if logits.dim() != labels.dim() {
        return Err(invalid("logits and labels differ in shape"));
    }
    let mut total = 0.0;
    let mut count = 0;
    for t in 0..logits.ncols() {
        let s: Vec<f64> = logits.column(t).to_vec();
        let l: Vec<bool> = labels.column(t).iter().map(|&y| y > 0.5).collect();
        let v = match metric {
            QualityMetric::Auroc => auroc(&s, &l),
            QualityMetric::Ap => average_precision(&s, &l),
        };
        match v {
            Ok(v) => {
                total += v;
                count += 1;
            }
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("no task has both classes".into()));
    }
    Ok(total / count as f64)
}
