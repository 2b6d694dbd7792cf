//! Brute-force reference implementations of the search protocols.

use feature_aging::dataio::FaceEmbedding;
use feature_aging::eval::{Gallery, GalleryEntry, Probe, ProbeSet};
use rand::Rng;

pub fn random_unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 0.1 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random gallery/probe instance; probe subjects are a mix of enrolled and
/// unenrolled identities. Scores are quantized so ties occur.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    max_probes: usize,
    max_gallery: usize,
) -> (Gallery, ProbeSet) {
    let d = 4;
    let n_gallery = rng.gen_range(2..=max_gallery);
    let n_subjects = rng.gen_range(1..=n_gallery);
    let quantize = |v: Vec<f32>| -> Vec<f32> {
        let q: Vec<f32> = v.iter().map(|x| (x * 4.0).round() / 4.0).collect();
        if q.iter().all(|&x| x == 0.0) {
            v
        } else {
            q
        }
    };
    let entries = (0..n_gallery)
        .map(|i| {
            let s = if i < n_subjects {
                i
            } else {
                rng.gen_range(0..n_subjects)
            };
            GalleryEntry {
                embedding: FaceEmbedding::normalized(
                    format!("g{s}"),
                    rng.gen_range(2.0..8.0),
                    quantize(random_unit(rng, d)),
                )
                .unwrap(),
                distractor: false,
            }
        })
        .collect();
    let gallery = Gallery::new(entries);
    let n_probes = rng.gen_range(1..=max_probes);
    let probes = (0..n_probes)
        .map(|_| {
            let mated = rng.gen_bool(0.6);
            let subject = if mated {
                format!("g{}", rng.gen_range(0..n_subjects))
            } else {
                format!("u{}", rng.gen_range(0..100))
            };
            Probe {
                embedding: FaceEmbedding::normalized(
                    subject,
                    rng.gen_range(8.0..20.0),
                    quantize(random_unit(rng, d)),
                )
                .unwrap(),
                mated,
            }
        })
        .collect();
    let probes = ProbeSet::new(probes, &gallery).unwrap();
    (gallery, probes)
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full ranking of gallery entries: score descending, insertion order ascending.
pub fn ranked(gallery: &Gallery, probe: &FaceEmbedding) -> Vec<(f32, usize)> {
    let mut all: Vec<(f32, usize)> = gallery
        .entries
        .iter()
        .enumerate()
        .map(|(j, g)| {
            (
                dot(g.embedding.vector(), probe.vector()).clamp(-1.0, 1.0),
                j,
            )
        })
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    all
}

pub fn oracle_closed_set(gallery: &Gallery, probes: &ProbeSet) -> f64 {
    let mated: Vec<&Probe> = probes.probes.iter().filter(|p| p.mated).collect();
    let hits = mated
        .iter()
        .filter(|p| {
            let top = ranked(gallery, &p.embedding)[0].1;
            gallery.entries[top].embedding.subject_id == p.embedding.subject_id
        })
        .count();
    if mated.is_empty() {
        0.0
    } else {
        hits as f64 / mated.len() as f64
    }
}

/// Tries every observed score (and just above the maximum) as threshold and
/// keeps the smallest one whose false accept rate stays within budget.
pub fn oracle_threshold(impostor: &[f32], far: f64) -> f32 {
    let mut candidates: Vec<f32> = impostor.to_vec();
    let max = impostor.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    candidates.push(max.next_up());
    candidates
        .into_iter()
        .filter(|&t| {
            let accepted = impostor.iter().filter(|&&s| s >= t).count();
            accepted as f64 <= far * impostor.len() as f64 + 1e-9
        })
        .fold(f32::INFINITY, f32::min)
}

pub fn oracle_open_set(gallery: &Gallery, probes: &ProbeSet, far: f64) -> (f32, f64) {
    let impostor: Vec<f32> = probes
        .probes
        .iter()
        .filter(|p| !p.mated)
        .map(|p| ranked(gallery, &p.embedding)[0].0)
        .collect();
    let t = oracle_threshold(&impostor, far);
    let mated: Vec<&Probe> = probes.probes.iter().filter(|p| p.mated).collect();
    let hits = mated
        .iter()
        .filter(|p| {
            let (s, top) = ranked(gallery, &p.embedding)[0];
            gallery.entries[top].embedding.subject_id == p.embedding.subject_id && s >= t
        })
        .count();
    (
        t,
        if mated.is_empty() {
            0.0
        } else {
            hits as f64 / mated.len() as f64
        },
    )
}

/// Best accuracy over every way of accepting the top-k scores.
pub fn oracle_verification(scores: &[(f32, bool)]) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = sorted.len();
    let mut best = 0.0f64;
    for k in 0..=n {
        // a cut is only realizable between distinct scores
        if k > 0 && k < n && sorted[k - 1].0 == sorted[k].0 {
            continue;
        }
        let correct = sorted
            .iter()
            .enumerate()
            .filter(|(i, s)| (*i < k) == s.1)
            .count();
        best = best.max(correct as f64 / n as f64);
    }
    best
}
