//! ROC/AUC and F-β computation over held-out scores.
//!
//! Thresholds sweep the distinct score values in descending order; a sample
//! is predicted positive at threshold `t` when `score >= t`. Tied scores are
//! grouped at a single threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Beta values reported by default: the F1 score plus the published
/// robustness sweep.
pub const DEFAULT_BETAS: [f64; 5] = [0.5, 1.0, 2.0, 3.0, 5.0];

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("labels contain a single class; ROC is undefined")]
    SingleClass,
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("beta must be positive, got {0}")]
    InvalidBeta(f64),
    #[error("scores and labels length mismatch: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
}

/// One operating point of the ROC curve. The initial `(0, 0)` point carries
/// threshold `+inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FBetaCurve {
    pub betas: Vec<f64>,
    /// `per_beta[i]` holds the `(threshold, f_score)` sweep for `betas[i]`.
    pub per_beta: Vec<Vec<(f64, f64)>>,
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFiniteScore(i));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    Ok((n_pos, n_neg))
}

/// Indices sorted by score descending; ties keep input order (irrelevant to
/// the grouped sweep, but deterministic).
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order
}

/// ROC curve with trapezoidal AUC.
///
/// Points start at `(0, 0)` and end at `(1, 1)`; both rates are
/// non-decreasing along the sweep.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve, MetricError> {
    let (n_pos, n_neg) = check_inputs(scores, labels)?;
    let order = descending_order(scores);

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // consume the whole tie group before emitting a point
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold,
        });
    }

    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

/// Brute-force Mann-Whitney AUC: `(concordant + 0.5 * tied) / (n_pos * n_neg)`.
///
/// Independent of [`roc_curve`]; the two must agree to within 1e-12.
pub fn auc_pair_oracle(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let (n_pos, n_neg) = check_inputs(scores, labels)?;
    let mut numer = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                numer += 1.0;
            } else if scores[i] == scores[j] {
                numer += 0.5;
            }
        }
    }
    Ok(numer / (n_pos as f64 * n_neg as f64))
}

/// `(1 + beta^2) * P * R / (beta^2 * P + R)`, defined as 0 when both the
/// numerator terms vanish.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> Result<f64, MetricError> {
    if !(beta > 0.0) {
        return Err(MetricError::InvalidBeta(beta));
    }
    let denom = beta * beta * precision + recall;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 + beta * beta) * precision * recall / denom)
}

/// F-β sweeps over the same descending distinct-score thresholds as the ROC
/// curve. Precision is taken as 0 when nothing is predicted positive.
pub fn f_beta_curve(
    scores: &[f64],
    labels: &[bool],
    betas: &[f64],
) -> Result<FBetaCurve, MetricError> {
    let (n_pos, _) = check_inputs(scores, labels)?;
    for &b in betas {
        if !(b > 0.0) {
            return Err(MetricError::InvalidBeta(b));
        }
    }
    let order = descending_order(scores);

    // one (threshold, precision, recall) triple per distinct score
    let mut sweep = Vec::new();
    let mut tp = 0usize;
    let mut predicted_pos = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            }
            predicted_pos += 1;
            i += 1;
        }
        let precision = if predicted_pos == 0 {
            0.0
        } else {
            tp as f64 / predicted_pos as f64
        };
        let recall = tp as f64 / n_pos as f64;
        sweep.push((threshold, precision, recall));
    }

    let per_beta = betas
        .iter()
        .map(|&beta| {
            sweep
                .iter()
                .map(|&(t, p, r)| (t, f_beta(p, r, beta).expect("beta validated")))
                .collect()
        })
        .collect();
    Ok(FBetaCurve {
        betas: betas.to_vec(),
        per_beta,
    })
}
