//! Accuracy and AUROC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Predicted detection class from `p(AD)`; an exact tie goes to NC.
pub fn predicted_class(p_ad: f64) -> usize {
    usize::from(p_ad > 0.5)
}

/// Fraction of cases whose argmax class equals the truth (0 = NC, 1 = AD).
pub fn accuracy(p_ad: &[f64], truths: &[usize]) -> Result<f64> {
    if p_ad.is_empty() {
        return Err(Error::EmptyEval("no predictions to score".into()));
    }
    if p_ad.len() != truths.len() {
        return Err(Error::EmptyEval(format!(
            "{} predictions for {} labels",
            p_ad.len(),
            truths.len()
        )));
    }
    let correct = p_ad
        .iter()
        .zip(truths)
        .filter(|(p, t)| predicted_class(**p) == **t)
        .count();
    Ok(correct as f64 / p_ad.len() as f64)
}

/// Rank-statistic AUROC: the probability that a random positive scores above
/// a random negative, ties counting one half. `O(n log n)`.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::UndefinedMetric(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs at least one positive and one negative".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // count, for each tie block, the negatives strictly below it
    let mut concordant = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let block = &order[i..j];
        let pos = block.iter().filter(|&&k| positive[k]).count();
        let neg = block.len() - pos;
        concordant += pos as f64 * neg_below as f64 + 0.5 * (pos * neg) as f64;
        neg_below += neg;
        i = j;
    }
    Ok(concordant / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// `None` when the evaluated cases hold a single class.
    pub auroc: Option<f64>,
    pub n_cases: usize,
    pub n_nc: usize,
    pub n_ad: usize,
    pub strategy: Option<String>,
    pub seed: Option<u64>,
}

impl MetricsReport {
    pub fn from_scores(p_ad: &[f64], truths: &[usize]) -> Result<Self> {
        let accuracy = accuracy(p_ad, truths)?;
        let positive: Vec<bool> = truths.iter().map(|&t| t == 1).collect();
        let n_ad = positive.iter().filter(|p| **p).count();
        Ok(Self {
            accuracy,
            auroc: auroc(p_ad, &positive).ok(),
            n_cases: truths.len(),
            n_nc: truths.len() - n_ad,
            n_ad,
            strategy: None,
            seed: None,
        })
    }

    pub fn error_rate(&self) -> f64 {
        1.0 - self.accuracy
    }
}

/// Mean per-region accuracy of severity predictions.
pub fn mc_accuracy(predicted: &[Vec<[f64; 3]>], labels: &[Vec<usize>]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (dists, ys) in predicted.iter().zip(labels) {
        for (d, &y) in dists.iter().zip(ys) {
            // argmax with ties to the lower class
            let mut best = 0;
            for c in 1..3 {
                if d[c] > d[best] {
                    best = c;
                }
            }
            correct += usize::from(best == y);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyEval("no severity predictions to score".into()));
    }
    Ok(correct as f64 / total as f64)
}
