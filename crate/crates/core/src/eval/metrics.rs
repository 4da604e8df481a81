//! Stream metrics: ID accuracy, AUROC of the OOD score and their harmonic mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of ID samples predicted correctly; `None` without ID samples.
pub fn accuracy(preds: &[usize], labels: &[usize], ood: &[bool]) -> Result<Option<f64>> {
    if preds.len() != labels.len() || preds.len() != ood.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            lhs: [preds.len(), labels.len()],
            rhs: [ood.len(), 0],
        });
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for ((p, l), &o) in preds.iter().zip(labels).zip(ood) {
        if !o {
            total += 1;
            correct += usize::from(p == l);
        }
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

/// Probability that an OOD score exceeds an ID score, ties counted ½.
/// Computed from midranks in `O(M log M)`; `None` unless both classes occur.
pub fn auroc(scores: &[f64], ood: &[bool]) -> Result<Option<f64>> {
    check_lengths(scores, ood)?;
    let pos = ood.iter().filter(|&&o| o).count();
    let neg = ood.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| ood[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Pairwise `O(M²)` reference for [`auroc`].
pub fn auroc_pairwise(scores: &[f64], ood: &[bool]) -> Result<Option<f64>> {
    check_lengths(scores, ood)?;
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        if !ood[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if ood[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    Ok((pairs > 0).then(|| wins / pairs as f64))
}

fn check_lengths(scores: &[f64], ood: &[bool]) -> Result<()> {
    if scores.len() != ood.len() {
        return Err(Error::ShapeMismatch {
            op: "auroc",
            lhs: [scores.len(), 1],
            rhs: [ood.len(), 1],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::config("AUROC scores contain NaN"));
    }
    Ok(())
}

/// `2ab/(a+b)`, or 0 when both are 0.
pub fn h_score(acc: f64, auroc: f64) -> f64 {
    if acc + auroc == 0.0 {
        0.0
    } else {
        2.0 * acc * auroc / (acc + auroc)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub acc: Option<f64>,
    pub auroc: Option<f64>,
    pub h_score: Option<f64>,
}

impl MetricsSummary {
    pub fn compute(preds: &[usize], scores: &[f64], labels: &[usize], ood: &[bool]) -> Result<MetricsSummary> {
        let acc = accuracy(preds, labels, ood)?;
        let auroc = auroc(scores, ood)?;
        let h_score = match (acc, auroc) {
            (Some(a), Some(b)) => Some(h_score(a, b)),
            _ => None,
        };
        Ok(MetricsSummary { acc, auroc, h_score })
    }
}
