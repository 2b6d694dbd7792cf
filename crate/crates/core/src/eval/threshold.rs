use serde::{Deserialize, Serialize};

use super::{cosine_similarity, EvalError};
use crate::dataio::FaceEmbedding;

/// Fraction of `impostor` scores at or above `threshold`.
pub fn empirical_far(impostor: &[f32], threshold: f32) -> f64 {
    if impostor.is_empty() {
        return 0.0;
    }
    impostor.iter().filter(|&&s| s >= threshold).count() as f64 / impostor.len() as f64
}

/// Smallest observed score `τ` with `FAR(τ) ≤ far_target`, where a score is
/// accepted when `≥ τ`. If ties at the cut make every observed score exceed
/// the budget, the threshold moves just past the largest score (accept none).
pub fn calibrate_threshold(impostor: &[f32], far_target: f64) -> Result<f32, EvalError> {
    if !(far_target > 0.0 && far_target <= 1.0) {
        return Err(EvalError::FarTarget(far_target));
    }
    let required = (1.0 / far_target - 1e-9).ceil() as usize;
    if impostor.len() < required || impostor.is_empty() {
        return Err(EvalError::InsufficientImpostors {
            far: far_target,
            required: required.max(1),
            found: impostor.len(),
        });
    }
    let mut sorted = impostor.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let allowed = (far_target * n as f64 + 1e-9).floor() as usize;
    if allowed >= n {
        return Ok(sorted[n - 1]);
    }
    // accepting `sorted[i]` accepts every score ≥ it; walk down while the
    // count stays within budget, only stopping at the end of a run of ties
    let mut best = None;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        if j + 1 > allowed {
            break;
        }
        best = Some(sorted[i]);
        i = j + 1;
    }
    Ok(best.unwrap_or_else(|| sorted[0].next_up()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ThresholdPolicy {
    /// Best accuracy over every threshold (sweep of all midpoints).
    Best,
    /// Threshold chosen on k−1 folds, accuracy measured on the held-out fold.
    CrossValidated { folds: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPair {
    pub a: FaceEmbedding,
    pub b: FaceEmbedding,
    pub same: bool,
}

pub fn verification_accuracy(
    pairs: &[LabeledPair],
    policy: ThresholdPolicy,
) -> Result<f64, EvalError> {
    let scores = pairs
        .iter()
        .map(|p| Ok((cosine_similarity(&p.a, &p.b)?, p.same)))
        .collect::<Result<Vec<_>, EvalError>>()?;
    verification_accuracy_scores(&scores, policy)
}

fn accuracy_at(scores: &[(f32, bool)], threshold: f32) -> f64 {
    scores
        .iter()
        .filter(|&&(s, same)| (s >= threshold) == same)
        .count() as f64
        / scores.len() as f64
}

/// Candidate thresholds: below the minimum, every midpoint between distinct
/// neighbours, and above the maximum. Returns the best (first on ties).
fn best_threshold(scores: &[(f32, bool)]) -> (f32, f64) {
    let mut v: Vec<f32> = scores.iter().map(|s| s.0).collect();
    v.sort_by(f32::total_cmp);
    v.dedup();
    let mut candidates = vec![v[0] - 1.0];
    candidates.extend(v.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(v[v.len() - 1] + 1.0);
    let mut best = (candidates[0], accuracy_at(scores, candidates[0]));
    for &t in &candidates[1..] {
        let a = accuracy_at(scores, t);
        if a > best.1 {
            best = (t, a);
        }
    }
    best
}

/// Binary same/different accuracy of `(score, same)` pairs.
pub fn verification_accuracy_scores(
    scores: &[(f32, bool)],
    policy: ThresholdPolicy,
) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    if scores.iter().all(|s| s.1) || scores.iter().all(|s| !s.1) {
        return Err(EvalError::SingleClass);
    }
    match policy {
        ThresholdPolicy::Best => Ok(best_threshold(scores).1),
        ThresholdPolicy::CrossValidated { folds } => {
            let folds = folds.clamp(2, scores.len());
            let mut correct = 0usize;
            for f in 0..folds {
                let (test, train): (Vec<_>, Vec<_>) =
                    scores.iter().enumerate().partition(|(i, _)| i % folds == f);
                let train: Vec<(f32, bool)> = train.into_iter().map(|(_, &s)| s).collect();
                let t = if train.is_empty() {
                    0.0
                } else {
                    best_threshold(&train).0
                };
                correct += test
                    .iter()
                    .filter(|(_, &(s, same))| (s >= t) == same)
                    .count();
            }
            Ok(correct as f64 / scores.len() as f64)
        }
    }
}
