//! Stages of the end-to-end run (corpora, encoder, feature aging, generator,
//! evaluation) and the measurements taken on their outputs. The command line
//! wraps these with file I/O; the test suites call them directly.

mod ablation;
mod config;

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

pub use ablation::{ablate_style_dim, ablation_csv, AblationRow};
pub use config::{
    AblationConfig, DriftConfig, EncoderCorpusConfig, Paths, ProtocolConfig, RunConfig, PRESETS,
};

use crate::dataio::{DataError, FaceEmbedding, ImageSample, Manifest, ManifestRecord, Split};
use crate::eval::{
    closed_set_search, lapse_curve, mean_feature_drift, open_set_search, DriftPoint, EvalError,
    Gallery, GalleryEntry, IdentificationReport, LapseBucket, Probe, ProbeSet,
};
use crate::fam::{embedding_pairs, fam_loss, identity_loss, AgePair, FamError, FamParams};
use crate::generator::{Generator, GeneratorError, IdEncoder};
use crate::synthworld::{
    generate_corpus, generate_drift_corpus, generate_encoder_corpus, Corpus, WorldError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fam(#[from] FamError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub struct Corpora {
    pub main: Corpus,
    pub encoder: Corpus,
    pub drift: Corpus,
}

pub fn generate_corpora(cfg: &RunConfig) -> Result<Corpora, PipelineError> {
    let e = &cfg.encoder_corpus;
    Ok(Corpora {
        main: generate_corpus(&cfg.corpus)?,
        encoder: generate_encoder_corpus(
            e.n_subjects,
            e.styles_per_subject,
            e.age_window,
            cfg.encoder_corpus_seed(),
        )?,
        drift: generate_drift_corpus(cfg.drift.n_subjects, &cfg.drift.ages, cfg.drift_seed())?,
    })
}

/// Embeddings of the main corpus grouped by protocol role.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSplits {
    pub train: Vec<FaceEmbedding>,
    /// Gallery images plus the youngest image of each distractor subject.
    pub gallery: Vec<FaceEmbedding>,
    pub probes: Vec<FaceEmbedding>,
    /// Mated images closer than the minimum lapse to their gallery image.
    pub test: Vec<FaceEmbedding>,
}

/// Indices of the records forming the gallery, in manifest order.
pub fn gallery_indices(manifest: &Manifest) -> Vec<usize> {
    let mut seen = HashSet::new();
    manifest
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| match r.split {
            Split::Gallery => true,
            // records of a subject are stored youngest first
            Split::Distractor => seen.insert(r.subject_id.clone()),
            _ => false,
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn split_embeddings(
    manifest: &Manifest,
    embeddings: &[FaceEmbedding],
) -> Result<EmbeddingSplits, PipelineError> {
    if manifest.len() != embeddings.len() {
        return Err(PipelineError::Invariant(format!(
            "{} manifest records but {} embeddings",
            manifest.len(),
            embeddings.len()
        )));
    }
    let pick = |split: Split| -> Vec<FaceEmbedding> {
        manifest
            .records()
            .iter()
            .zip(embeddings)
            .filter(|(r, _)| r.split == split)
            .map(|(_, e)| e.clone())
            .collect()
    };
    Ok(EmbeddingSplits {
        train: pick(Split::Train),
        gallery: gallery_indices(manifest)
            .into_iter()
            .map(|i| embeddings[i].clone())
            .collect(),
        probes: pick(Split::Probe),
        test: pick(Split::Test),
    })
}

/// A training manifest for embeddings that carry no file paths.
pub fn embedding_manifest(embeddings: &[FaceEmbedding]) -> Result<Manifest, PipelineError> {
    let records = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| ManifestRecord {
            subject_id: e.subject_id.clone(),
            age: e.age,
            style_id: "-".into(),
            split: Split::Train,
            path: format!("#{i}"),
        })
        .collect();
    Ok(Manifest::new(records)?)
}

/// Search sets from role-grouped embeddings. Gallery subjects without any
/// probe or test image are distractors; probes whose subject is enrolled are
/// mated. The lapse set holds all mated probe and test images.
pub fn search_sets(
    gallery: &[FaceEmbedding],
    probes: &[FaceEmbedding],
    test: &[FaceEmbedding],
) -> Result<(Gallery, ProbeSet, ProbeSet), PipelineError> {
    let queried: HashSet<&str> = probes
        .iter()
        .chain(test)
        .map(|e| e.subject_id.as_str())
        .collect();
    let enrolled: HashSet<&str> = gallery.iter().map(|e| e.subject_id.as_str()).collect();
    let g = Gallery::new(
        gallery
            .iter()
            .map(|e| GalleryEntry {
                embedding: e.clone(),
                distractor: !queried.contains(e.subject_id.as_str()),
            })
            .collect(),
    );
    let probe = |e: &FaceEmbedding| Probe {
        embedding: e.clone(),
        mated: enrolled.contains(e.subject_id.as_str()),
    };
    let p = ProbeSet::new(probes.iter().map(probe).collect(), &g)?;
    let lapse = ProbeSet::new(
        probes
            .iter()
            .chain(test)
            .map(probe)
            .filter(|p| p.mated)
            .collect(),
        &g,
    )?;
    Ok((g, p, lapse))
}

/// Baseline report, then (with `fam`) the aged-gallery report. Open-set
/// figures need unmated probes and are omitted without them.
pub fn evaluate(
    gallery: &[FaceEmbedding],
    probes: &[FaceEmbedding],
    test: &[FaceEmbedding],
    fam: Option<&FamParams>,
    protocol: &ProtocolConfig,
) -> Result<Vec<IdentificationReport>, PipelineError> {
    let (g, p, lapse) = search_sets(gallery, probes, test)?;
    let has_unmated = p.probes.iter().any(|p| !p.mated);
    let mut reports = Vec::new();
    for ager in [None, fam]
        .into_iter()
        .take(if fam.is_some() { 2 } else { 1 })
    {
        let mut report = if has_unmated {
            open_set_search(&g, &p, protocol.far_target, ager)?
        } else {
            closed_set_search(&g, &p, ager)?
        };
        report.per_lapse = lapse_curve(&g, &lapse, &LapseBucket::standard(), ager)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Mean-feature drift of the drift corpus relative to its youngest age.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftTable {
    pub anchor_age: f32,
    pub baseline: Vec<DriftPoint>,
    pub fam: Option<Vec<DriftPoint>>,
}

pub fn drift_table(
    embeddings: &[FaceEmbedding],
    fam: Option<&FamParams>,
) -> Result<DriftTable, PipelineError> {
    let mut groups: BTreeMap<u32, Vec<FaceEmbedding>> = BTreeMap::new();
    for e in embeddings {
        // ages are non-negative, so the bit pattern orders them
        groups.entry(e.age.to_bits()).or_default().push(e.clone());
    }
    let mut groups = groups.into_values();
    let anchor = groups
        .next()
        .ok_or_else(|| PipelineError::Invariant("empty drift set".into()))?;
    let targets: Vec<(f32, Vec<FaceEmbedding>)> = groups.map(|g| (g[0].age, g)).collect();
    if targets.is_empty() {
        return Err(PipelineError::Invariant(
            "drift set has a single age".into(),
        ));
    }
    Ok(DriftTable {
        anchor_age: anchor[0].age,
        baseline: mean_feature_drift(&anchor, &targets, None)?,
        fam: fam
            .map(|f| mean_feature_drift(&anchor, &targets, Some(f)))
            .transpose()?,
    })
}

pub fn drift_csv(table: &DriftTable) -> Vec<u8> {
    let mut out = String::from("target_age,lapse,drift_baseline,drift_fam\n");
    for (i, b) in table.baseline.iter().enumerate() {
        let fam = table
            .fam
            .as_ref()
            .map(|f| f[i].magnitude.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            b.target_age,
            b.target_age - table.anchor_age,
            b.magnitude,
            fam
        ));
    }
    out.into_bytes()
}

/// Held-out feature-aging loss and the identity-map loss on all genuine
/// pairs of `embeddings`.
pub fn fam_vs_identity(
    fam: &FamParams,
    embeddings: &[FaceEmbedding],
) -> Result<(f32, f32), PipelineError> {
    let manifest = embedding_manifest(embeddings)?;
    let pairs = embedding_pairs(&manifest, embeddings)?;
    Ok((fam_loss(fam, &pairs)?, identity_loss(&pairs)?))
}

/// Mean absolute pixel error of reconstructing each image from its own
/// style and identity vectors.
pub fn reconstruction_mae(
    generator: &Generator,
    encoder: &IdEncoder,
    images: &[&ImageSample],
) -> Result<f32, PipelineError> {
    let rec = reconstruct(generator, encoder, images)?;
    Ok(mean_abs_error(&rec, images))
}

pub(crate) fn reconstruct(
    generator: &Generator,
    encoder: &IdEncoder,
    images: &[&ImageSample],
) -> Result<Vec<ImageSample>, PipelineError> {
    let styles = generator.encode_styles(images)?;
    let ids = encoder.embed_vectors(images)?;
    Ok(generator.decode_batch(&as_slices(&styles), &as_slices(&ids))?)
}

pub(crate) fn mean_abs_error(a: &[ImageSample], b: &[&ImageSample]) -> f32 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            x.pixels()
                .iter()
                .zip(y.pixels())
                .map(|(p, q)| (p - q).abs() as f64)
                .sum::<f64>()
                / x.pixels().len() as f64
        })
        .sum();
    (total / a.len().max(1) as f64) as f32
}

pub(crate) fn as_slices(v: &[Vec<f32>]) -> Vec<&[f32]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Target age of the round-trip check: eight years older for the younger
/// half of the range, eight years younger otherwise.
pub fn round_trip_target(age: f32) -> f32 {
    if age <= 11.0 {
        age + 8.0
    } else {
        age - 8.0
    }
}

/// Per image: cosine between the aged feature and the re-encoded image
/// decoded from it.
pub fn aged_round_trip(
    fam: &FamParams,
    generator: &Generator,
    encoder: &IdEncoder,
    images: &[&ImageSample],
) -> Result<Vec<f32>, PipelineError> {
    let ids = encoder.embed_vectors(images)?;
    let ages = images
        .iter()
        .map(|i| AgePair::new(i.age, round_trip_target(i.age)))
        .collect::<Result<Vec<_>, _>>()?;
    let aged = fam.age_vectors(&as_slices(&ids), &ages)?;
    let styles = generator.encode_styles(images)?;
    let out = generator.decode_batch(&as_slices(&styles), &as_slices(&aged))?;
    let back = encoder.embed_vectors(&out.iter().collect::<Vec<_>>())?;
    Ok(back
        .iter()
        .zip(&aged)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum())
        .collect())
}
