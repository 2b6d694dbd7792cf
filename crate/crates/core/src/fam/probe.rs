use super::{age_feature, AgePair, FamError, FamParams};
use crate::dataio::{FaceEmbedding, ImageSample};
use crate::generator::Generator;

/// Per-pixel `|decode(aged) − decode(original)|` with summary statistics.
#[derive(Clone, Debug)]
pub struct DifferenceProbe {
    pub image: ImageSample,
    pub mean_abs: f32,
    /// Share of squared difference inside `mask`, when a mask was given.
    pub masked_energy: Option<f32>,
}

pub fn feature_difference_probe(
    fam: &FamParams,
    generator: &Generator,
    style: &[f32],
    embedding: &FaceEmbedding,
    ages: AgePair,
    mask: Option<&[bool]>,
) -> Result<DifferenceProbe, FamError> {
    let aged = age_feature(fam, embedding, ages)?;
    let decode = |v: &[f32]| {
        generator
            .decode(style, v)
            .map_err(|e| FamError::Config(e.to_string()))
    };
    let (a, b) = (decode(aged.vector())?, decode(embedding.vector())?);
    let diff: Vec<f32> = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y).abs())
        .collect();
    let mean_abs = diff.iter().sum::<f32>() / diff.len() as f32;
    let masked_energy = mask.map(|m| {
        let c = a.channels;
        let total: f64 = diff.iter().map(|&v| (v as f64).powi(2)).sum();
        let inside: f64 = diff
            .iter()
            .enumerate()
            .filter(|(i, _)| m[i / c])
            .map(|(_, &v)| (v as f64).powi(2))
            .sum();
        if total > 0.0 {
            (inside / total) as f32
        } else {
            1.0
        }
    });
    let image = ImageSample::new(
        embedding.subject_id.clone(),
        ages.target,
        "diff",
        a.dims(),
        diff,
    )?;
    Ok(DifferenceProbe {
        image,
        mean_abs,
        masked_energy,
    })
}
