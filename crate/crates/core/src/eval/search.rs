use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{calibrate_threshold, EvalError};
use crate::dataio::FaceEmbedding;
use crate::fam::{AgePair, FamParams};

pub fn cosine_similarity(a: &FaceEmbedding, b: &FaceEmbedding) -> Result<f32, EvalError> {
    if a.dim() != b.dim() {
        return Err(EvalError::Dimension(a.dim(), b.dim()));
    }
    Ok(dot(a.vector(), b.vector()).clamp(-1.0, 1.0))
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    pub embedding: FaceEmbedding,
    pub distractor: bool,
}

/// Enrolled embeddings in insertion order; ties in ranking resolve to the
/// earliest entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gallery {
    pub entries: Vec<GalleryEntry>,
}

impl Gallery {
    pub fn new(entries: Vec<GalleryEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn subjects(&self) -> HashSet<&str> {
        self.entries
            .iter()
            .map(|e| e.embedding.subject_id.as_str())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub embedding: FaceEmbedding,
    /// The true mate is enrolled in the gallery.
    pub mated: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeSet {
    pub probes: Vec<Probe>,
}

impl ProbeSet {
    /// Fails if a mated probe's subject is missing from `gallery`.
    pub fn new(probes: Vec<Probe>, gallery: &Gallery) -> Result<Self, EvalError> {
        let enrolled = gallery.subjects();
        if let Some(p) = probes
            .iter()
            .find(|p| p.mated && !enrolled.contains(p.embedding.subject_id.as_str()))
        {
            return Err(EvalError::UnenrolledMate(p.embedding.subject_id.clone()));
        }
        Ok(Self { probes })
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

/// Probe-by-gallery cosine scores. With an ager, every gallery feature is
/// first aged from its own age to the probe's age.
pub fn score_matrix(
    gallery: &Gallery,
    probes: &ProbeSet,
    ager: Option<&FamParams>,
) -> Result<Vec<Vec<f32>>, EvalError> {
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    let d = gallery.entries[0].embedding.dim();
    for e in gallery
        .entries
        .iter()
        .map(|e| &e.embedding)
        .chain(probes.probes.iter().map(|p| &p.embedding))
    {
        if e.dim() != d {
            return Err(EvalError::Dimension(d, e.dim()));
        }
    }
    let raw: Vec<&[f32]> = gallery
        .entries
        .iter()
        .map(|e| e.embedding.vector())
        .collect();
    probes
        .probes
        .iter()
        .map(|p| {
            let pv = p.embedding.vector();
            match ager {
                None => Ok(raw.iter().map(|g| dot(g, pv)).collect()),
                Some(fam) => {
                    let ages = gallery
                        .entries
                        .iter()
                        .map(|g| AgePair::new(g.embedding.age, p.embedding.age))
                        .collect::<Result<Vec<_>, _>>()?;
                    let aged = fam.age_vectors(&raw, &ages)?;
                    Ok(aged.iter().map(|g| dot(g, pv)).collect())
                }
            }
        })
        .collect()
}

/// Index of the best gallery entry; the earliest wins ties.
pub fn top_match(scores: &[f32]) -> usize {
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = j;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LapseBucket {
    pub lo: f32,
    pub hi: f32,
    pub inclusive_hi: bool,
}

impl LapseBucket {
    pub fn contains(&self, lapse: f32) -> bool {
        lapse >= self.lo && (lapse < self.hi || (self.inclusive_hi && lapse == self.hi))
    }

    /// `[0,5)`, `[5,10)`, `[10,18]`.
    pub fn standard() -> Vec<LapseBucket> {
        vec![
            LapseBucket {
                lo: 0.0,
                hi: 5.0,
                inclusive_hi: false,
            },
            LapseBucket {
                lo: 5.0,
                hi: 10.0,
                inclusive_hi: false,
            },
            LapseBucket {
                lo: 10.0,
                hi: 18.0,
                inclusive_hi: true,
            },
        ]
    }
}

impl fmt::Display for LapseBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let close = if self.inclusive_hi { ']' } else { ')' };
        write!(f, "[{},{}{close}", self.lo, self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LapseResult {
    pub bucket: String,
    pub probes: usize,
    pub rank1: f64,
}

/// Results of one search condition (with or without gallery aging).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    /// `baseline` or `fam`.
    pub condition: String,
    pub probes: usize,
    pub gallery: usize,
    pub closed_set_rank1: f64,
    pub open_set_rank1_at_far: Option<f64>,
    pub far_target: Option<f64>,
    pub threshold: Option<f32>,
    pub per_lapse: Vec<LapseResult>,
}

fn condition(ager: Option<&FamParams>) -> String {
    if ager.is_some() { "fam" } else { "baseline" }.to_string()
}

/// Rank-1 hit rate of `scores` rows whose probe is mated.
pub fn closed_set_from_scores(
    scores: &[Vec<f32>],
    gallery_subjects: &[&str],
    probe_subjects: &[&str],
    mated: &[bool],
) -> f64 {
    let mut hits = 0usize;
    let mut n = 0usize;
    for ((row, subject), &m) in scores.iter().zip(probe_subjects).zip(mated) {
        if !m {
            continue;
        }
        n += 1;
        if gallery_subjects[top_match(row)] == *subject {
            hits += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Open-set rank-1 at `threshold`: mated probes whose top match is correct
/// and scores at least the threshold.
pub fn open_set_from_scores(
    scores: &[Vec<f32>],
    gallery_subjects: &[&str],
    probe_subjects: &[&str],
    mated: &[bool],
    threshold: f32,
) -> f64 {
    let mut hits = 0usize;
    let mut n = 0usize;
    for ((row, subject), &m) in scores.iter().zip(probe_subjects).zip(mated) {
        if !m {
            continue;
        }
        n += 1;
        let top = top_match(row);
        if gallery_subjects[top] == *subject && row[top] >= threshold {
            hits += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

fn labels<'a>(
    gallery: &'a Gallery,
    probes: &'a ProbeSet,
) -> (Vec<&'a str>, Vec<&'a str>, Vec<bool>) {
    (
        gallery
            .entries
            .iter()
            .map(|e| e.embedding.subject_id.as_str())
            .collect(),
        probes
            .probes
            .iter()
            .map(|p| p.embedding.subject_id.as_str())
            .collect(),
        probes.probes.iter().map(|p| p.mated).collect(),
    )
}

pub fn closed_set_search(
    gallery: &Gallery,
    probes: &ProbeSet,
    ager: Option<&FamParams>,
) -> Result<IdentificationReport, EvalError> {
    if probes.is_empty() {
        return Err(EvalError::EmptyProbes);
    }
    if let Some(p) = probes.probes.iter().find(|p| !p.mated) {
        return Err(EvalError::UnmatedProbe(p.embedding.subject_id.clone()));
    }
    let scores = score_matrix(gallery, probes, ager)?;
    let (g, p, m) = labels(gallery, probes);
    Ok(IdentificationReport {
        condition: condition(ager),
        probes: probes.len(),
        gallery: gallery.len(),
        closed_set_rank1: closed_set_from_scores(&scores, &g, &p, &m),
        open_set_rank1_at_far: None,
        far_target: None,
        threshold: None,
        per_lapse: Vec::new(),
    })
}

/// Calibrates on each unmated probe's best gallery score, then reports
/// closed-set (mated probes) and open-set rank-1.
pub fn open_set_search(
    gallery: &Gallery,
    probes: &ProbeSet,
    far_target: f64,
    ager: Option<&FamParams>,
) -> Result<IdentificationReport, EvalError> {
    if probes.is_empty() {
        return Err(EvalError::EmptyProbes);
    }
    let scores = score_matrix(gallery, probes, ager)?;
    let (g, p, m) = labels(gallery, probes);
    let impostor: Vec<f32> = scores
        .iter()
        .zip(&m)
        .filter(|(_, &mated)| !mated)
        .map(|(row, _)| row[top_match(row)])
        .collect();
    if impostor.is_empty() {
        return Err(EvalError::NoImpostors);
    }
    let threshold = calibrate_threshold(&impostor, far_target)?;
    Ok(IdentificationReport {
        condition: condition(ager),
        probes: probes.len(),
        gallery: gallery.len(),
        closed_set_rank1: closed_set_from_scores(&scores, &g, &p, &m),
        open_set_rank1_at_far: Some(open_set_from_scores(&scores, &g, &p, &m, threshold)),
        far_target: Some(far_target),
        threshold: Some(threshold),
        per_lapse: Vec::new(),
    })
}

/// Rank-1 of mated probes grouped by lapse to the true mate's first gallery
/// entry. Buckets without probes are omitted.
pub fn lapse_curve(
    gallery: &Gallery,
    probes: &ProbeSet,
    buckets: &[LapseBucket],
    ager: Option<&FamParams>,
) -> Result<Vec<LapseResult>, EvalError> {
    for (i, a) in buckets.iter().enumerate() {
        if !(a.lo <= a.hi) {
            return Err(EvalError::Buckets(format!("{a} is empty")));
        }
        for b in &buckets[i + 1..] {
            let disjoint = a.hi < b.lo
                || b.hi < a.lo
                || (a.hi == b.lo && !a.inclusive_hi)
                || (b.hi == a.lo && !b.inclusive_hi);
            if !disjoint {
                return Err(EvalError::Buckets(format!("{a} overlaps {b}")));
            }
        }
    }
    let mated = ProbeSet {
        probes: probes.probes.iter().filter(|p| p.mated).cloned().collect(),
    };
    let mated = ProbeSet::new(mated.probes, gallery)?;
    if mated.is_empty() {
        return Ok(Vec::new());
    }
    let scores = score_matrix(gallery, &mated, ager)?;
    let (g, p, m) = labels(gallery, &mated);
    let lapses: Vec<f32> = mated
        .probes
        .iter()
        .map(|pr| {
            let mate = gallery
                .entries
                .iter()
                .find(|e| e.embedding.subject_id == pr.embedding.subject_id)
                .expect("mated probes are enrolled");
            (pr.embedding.age - mate.embedding.age).abs()
        })
        .collect();
    let mut out = Vec::new();
    for b in buckets {
        let rows: Vec<usize> = (0..lapses.len())
            .filter(|&i| b.contains(lapses[i]))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let sub_scores: Vec<Vec<f32>> = rows.iter().map(|&i| scores[i].clone()).collect();
        let sub_p: Vec<&str> = rows.iter().map(|&i| p[i]).collect();
        let sub_m: Vec<bool> = rows.iter().map(|&i| m[i]).collect();
        out.push(LapseResult {
            bucket: b.to_string(),
            probes: rows.len(),
            rank1: closed_set_from_scores(&sub_scores, &g, &sub_p, &sub_m),
        });
    }
    Ok(out)
}
