use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::dataio::FaceEmbedding;
use crate::fam::{AgePair, FamParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub target_age: f32,
    /// `|mean(reference) − mean(target)|` per dimension.
    pub per_dim: Vec<f32>,
    pub magnitude: f32,
}

fn mean(vectors: &[&[f32]], d: usize) -> Vec<f64> {
    let mut m = vec![0.0f64; d];
    for v in vectors {
        for (a, &x) in m.iter_mut().zip(v.iter()) {
            *a += x as f64;
        }
    }
    m.iter_mut().for_each(|a| *a /= vectors.len().max(1) as f64);
    m
}

/// Per target age, the gap between the mean feature of the `targets` group
/// and the mean anchor feature. With `fam`, the anchor features are first
/// aged from their own age to the target age.
pub fn mean_feature_drift(
    anchor: &[FaceEmbedding],
    targets: &[(f32, Vec<FaceEmbedding>)],
    fam: Option<&FamParams>,
) -> Result<Vec<DriftPoint>, EvalError> {
    let d = anchor.first().ok_or(EvalError::EmptyProbes)?.dim();
    if let Some(e) = anchor
        .iter()
        .chain(targets.iter().flat_map(|t| &t.1))
        .find(|e| e.dim() != d)
    {
        return Err(EvalError::Dimension(d, e.dim()));
    }
    let anchor_vecs: Vec<&[f32]> = anchor.iter().map(FaceEmbedding::vector).collect();
    let plain = mean(&anchor_vecs, d);
    targets
        .iter()
        .map(|(age, group)| {
            if group.is_empty() {
                return Err(EvalError::EmptyProbes);
            }
            let reference = match fam {
                None => plain.clone(),
                Some(f) => {
                    let ages = anchor
                        .iter()
                        .map(|a| AgePair::new(a.age, *age))
                        .collect::<Result<Vec<_>, _>>()?;
                    let aged = f.age_vectors(&anchor_vecs, &ages)?;
                    mean(&aged.iter().map(Vec::as_slice).collect::<Vec<_>>(), d)
                }
            };
            let tm = mean(
                &group.iter().map(FaceEmbedding::vector).collect::<Vec<_>>(),
                d,
            );
            let per_dim: Vec<f32> = reference
                .iter()
                .zip(&tm)
                .map(|(a, b)| (a - b).abs() as f32)
                .collect();
            let magnitude = per_dim
                .iter()
                .map(|v| (*v as f64).powi(2))
                .sum::<f64>()
                .sqrt() as f32;
            Ok(DriftPoint {
                target_age: *age,
                per_dim,
                magnitude,
            })
        })
        .collect()
}
