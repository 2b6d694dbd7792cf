use log::info;
use serde::{Deserialize, Serialize};

use super::{as_slices, mean_abs_error, reconstruct, PipelineError, RunConfig};
use crate::dataio::{FaceEmbedding, ImageSample};
use crate::eval::top_match;
use crate::fam::{AgePair, FamParams};
use crate::generator::{train_generator, Generator, GeneratorConfig, IdEncoder};

/// One style dimensionality of the reconstruction/aging trade-off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    /// Mean absolute pixel error reconstructing gallery images.
    pub pixel_mae: f32,
    /// Gallery images reconstructed at their own age, re-encoded and searched.
    pub reconstruction_rank1: f64,
    /// Gallery images synthesized at each probe's age, re-encoded and searched.
    pub aged_rank1: f64,
    /// Gallery features aged directly, no images involved.
    pub feature_rank1: f64,
}

impl AblationRow {
    pub fn gap(&self) -> f64 {
        self.aged_rank1 - self.reconstruction_rank1
    }
}

fn rank1(rows: &[Vec<f32>], gallery_subjects: &[&str], probes: &[FaceEmbedding]) -> f64 {
    let hits = rows
        .iter()
        .zip(probes)
        .filter(|(row, p)| gallery_subjects[top_match(row)] == p.subject_id)
        .count();
    hits as f64 / probes.len().max(1) as f64
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains one generator per `k` in `cfg.ablation.k_values` and scores the
/// closed-set search of `probes` (all mated) against `gallery` images.
/// Generators in `reuse` stand in for training when their `k` matches; they
/// must come from the same configuration.
pub fn ablate_style_dim(
    cfg: &RunConfig,
    train_images: &[ImageSample],
    encoder: &IdEncoder,
    fam: &FamParams,
    gallery: &[&ImageSample],
    probes: &[FaceEmbedding],
    reuse: &[&Generator],
) -> Result<Vec<AblationRow>, PipelineError> {
    if gallery.is_empty() || probes.is_empty() {
        return Err(PipelineError::Invariant(
            "ablation needs gallery images and probes".into(),
        ));
    }
    let probes = &probes[..probes.len().min(cfg.ablation.probes)];
    let subjects: Vec<&str> = gallery.iter().map(|g| g.subject_id.as_str()).collect();
    let ids = encoder.embed_vectors(gallery)?;
    let aged_ids: Vec<Vec<Vec<f32>>> = probes
        .iter()
        .map(|p| {
            let ages = gallery
                .iter()
                .map(|g| AgePair::new(g.age, p.age))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(fam.age_vectors(&as_slices(&ids), &ages)?)
        })
        .collect::<Result<_, PipelineError>>()?;
    let feature_scores: Vec<Vec<f32>> = aged_ids
        .iter()
        .zip(probes)
        .map(|(aged, p)| aged.iter().map(|g| dot(g, p.vector())).collect())
        .collect();
    let feature_rank1 = rank1(&feature_scores, &subjects, probes);

    let mut rows = Vec::new();
    for &k in &cfg.ablation.k_values {
        let trained;
        let generator = match reuse.iter().find(|g| g.k() == k) {
            Some(g) => *g,
            None => {
                let gen_cfg = GeneratorConfig {
                    k,
                    iterations: cfg.ablation.iterations,
                    ..cfg.generator.clone()
                };
                trained = train_generator(train_images, encoder, &gen_cfg)?.0;
                &trained
            }
        };
        let recon = reconstruct(generator, encoder, gallery)?;
        let pixel_mae = mean_abs_error(&recon, gallery);
        let recon_ids = encoder.embed_vectors(&recon.iter().collect::<Vec<_>>())?;
        let recon_scores: Vec<Vec<f32>> = probes
            .iter()
            .map(|p| recon_ids.iter().map(|g| dot(g, p.vector())).collect())
            .collect();
        let styles = generator.encode_styles(gallery)?;
        let mut aged_scores = Vec::with_capacity(probes.len());
        for (aged, p) in aged_ids.iter().zip(probes) {
            let images = generator.decode_batch(&as_slices(&styles), &as_slices(aged))?;
            let back = encoder.embed_vectors(&images.iter().collect::<Vec<_>>())?;
            aged_scores.push(back.iter().map(|g| dot(g, p.vector())).collect());
        }
        let row = AblationRow {
            k,
            pixel_mae,
            reconstruction_rank1: rank1(&recon_scores, &subjects, probes),
            aged_rank1: rank1(&aged_scores, &subjects, probes),
            feature_rank1,
        };
        info!("ablation {row:?}");
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Vec<u8> {
    let mut out = String::from("k,pixel_mae,reconstruction_rank1,aged_rank1,feature_rank1,gap\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.k,
            r.pixel_mae,
            r.reconstruction_rank1,
            r.aged_rank1,
            r.feature_rank1,
            r.gap()
        ));
    }
    out.into_bytes()
}
