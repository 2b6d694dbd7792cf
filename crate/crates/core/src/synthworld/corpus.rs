use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render, StyleSpec, SubjectSpec};
use super::{WorldError, AGE_MAX, AGE_MIN};
use crate::dataio::{
    save_manifest, write_ppm, write_ppm_tagged, ImageSample, Manifest, ManifestRecord, Split,
};

const MAIN_STREAM: u64 = 1;
const ENCODER_STREAM: u64 = 2;
const DRIFT_STREAM: u64 = 3;

/// splitmix64 mix of `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Identity of subject `index` in the main corpus drawn with `seed`.
pub fn subject_spec(seed: u64, index: usize) -> SubjectSpec {
    SubjectSpec::sample(derive_seed(seed, MAIN_STREAM, index as u64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_subjects: usize,
    pub ages_per_subject: usize,
    pub seed: u64,
    pub test_fraction: f32,
    /// Share of test subjects whose images are all probes without a gallery entry.
    pub unmated_fraction: f32,
    /// Share of test subjects contributing a gallery distractor only.
    pub distractor_fraction: f32,
    /// Minimum gap between a probe and its subject's gallery image.
    pub min_probe_gap: f32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_subjects: 500,
            ages_per_subject: 4,
            seed: 7,
            test_fraction: 0.4,
            unmated_fraction: 0.35,
            distractor_fraction: 0.15,
            min_probe_gap: 5.0,
        }
    }
}

/// Rendered images with their manifest; `images[i]` belongs to `manifest.records()[i]`.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: Manifest,
    pub images: Vec<ImageSample>,
    pub styles: Vec<StyleSpec>,
    pub subjects: Vec<(String, SubjectSpec)>,
    pub warnings: Vec<String>,
}

impl Corpus {
    /// Writes `manifest.csv` and one PPM per record under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), WorldError> {
        self.write_tagged(dir, None)
    }

    /// Writes images and manifest; `comment` goes into every image header.
    pub fn write_tagged(&self, dir: &Path, comment: Option<&str>) -> Result<(), WorldError> {
        for (rec, img) in self.manifest.records().iter().zip(&self.images) {
            match comment {
                Some(c) => write_ppm_tagged(&dir.join(&rec.path), img, c)?,
                None => write_ppm(&dir.join(&rec.path), img)?,
            }
        }
        save_manifest(&dir.join("manifest.csv"), &self.manifest)?;
        Ok(())
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectSpec> {
        self.subjects.iter().find(|(s, _)| s == id).map(|(_, s)| s)
    }
}

fn draw_ages(rng: &mut ChaCha8Rng, n: usize, min_gap: f32) -> Vec<f32> {
    let draw = |rng: &mut ChaCha8Rng| (rng.gen_range(AGE_MIN..=AGE_MAX) * 100.0).round() / 100.0;
    for _ in 0..1000 {
        let mut ages: Vec<f32> = (0..n).map(|_| draw(rng)).collect();
        ages.sort_by(f32::total_cmp);
        let distinct = ages.windows(2).all(|w| w[0] != w[1]);
        if distinct && (n < 2 || ages[n - 1] - ages[0] >= min_gap) {
            return ages;
        }
    }
    // practically unreachable for the default age range
    (0..n)
        .map(|i| AGE_MIN + (AGE_MAX - AGE_MIN) * i as f32 / (n.max(2) - 1) as f32)
        .collect()
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Train,
    Mated,
    Unmated,
    Distractor,
}

fn assign_roles(cfg: &CorpusConfig, rng: &mut ChaCha8Rng, warnings: &mut Vec<String>) -> Vec<Role> {
    let n = cfg.n_subjects;
    let n_test = (n as f32 * cfg.test_fraction).round() as usize;
    if n_test < 2 || n - n_test < 2 {
        let msg = format!(
            "{n} subjects cannot form disjoint train and evaluation splits; all assigned to train"
        );
        warn!("{msg}");
        warnings.push(msg);
        return vec![Role::Train; n];
    }
    let n_unmated = (n_test as f32 * cfg.unmated_fraction).round() as usize;
    let n_distractor = (n_test as f32 * cfg.distractor_fraction).round() as usize;
    let n_mated = n_test.saturating_sub(n_unmated + n_distractor).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut roles = vec![Role::Train; n];
    for (rank, &i) in order.iter().take(n_test).enumerate() {
        roles[i] = if rank < n_mated {
            Role::Mated
        } else if rank < n_mated + n_unmated {
            Role::Unmated
        } else {
            Role::Distractor
        };
    }
    roles
}

fn validate(cfg: &CorpusConfig) -> Result<(), WorldError> {
    let frac_ok = |f: f32| (0.0..=1.0).contains(&f);
    if cfg.n_subjects == 0 || cfg.ages_per_subject == 0 {
        return Err(WorldError::Config(
            "need at least one subject and one age".into(),
        ));
    }
    if !frac_ok(cfg.test_fraction)
        || !frac_ok(cfg.unmated_fraction)
        || !frac_ok(cfg.distractor_fraction)
    {
        return Err(WorldError::Config("fractions must lie in [0, 1]".into()));
    }
    if cfg.unmated_fraction + cfg.distractor_fraction >= 1.0 {
        return Err(WorldError::Config(
            "no test subjects left for mated probes".into(),
        ));
    }
    if !(0.0..AGE_MAX - AGE_MIN).contains(&cfg.min_probe_gap) {
        return Err(WorldError::Config(format!(
            "min_probe_gap {} out of range",
            cfg.min_probe_gap
        )));
    }
    Ok(())
}

/// Renders the longitudinal corpus. Subject `i` draws everything from its own
/// derived seed, so adding subjects never changes existing ones.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus, WorldError> {
    validate(cfg)?;
    let mut warnings = Vec::new();
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, MAIN_STREAM, u64::MAX));
    let roles = assign_roles(cfg, &mut split_rng, &mut warnings);

    let mut records = Vec::with_capacity(cfg.n_subjects * cfg.ages_per_subject);
    let mut images = Vec::with_capacity(records.capacity());
    let mut styles = Vec::with_capacity(records.capacity());
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    for (i, &role) in roles.iter().enumerate() {
        let id = format!("s{i:04}");
        let spec = subject_spec(cfg.seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.birth_seed.rotate_left(17) ^ 0xA6E5);
        let ages = draw_ages(&mut rng, cfg.ages_per_subject, cfg.min_probe_gap);
        let youngest = ages[0];
        for (j, &age) in ages.iter().enumerate() {
            let style = StyleSpec::sample(&mut rng);
            let split = match role {
                Role::Train => Split::Train,
                Role::Mated if j == 0 => Split::Gallery,
                Role::Mated if age - youngest >= cfg.min_probe_gap => Split::Probe,
                Role::Mated => Split::Test,
                Role::Unmated => Split::Probe,
                Role::Distractor => Split::Distractor,
            };
            images.push(render(&spec, age, &style, &id)?);
            records.push(ManifestRecord {
                subject_id: id.clone(),
                age,
                style_id: style.label(),
                split,
                path: format!("images/{id}_{j}.ppm"),
            });
            styles.push(style);
        }
        subjects.push((id, spec));
    }
    Ok(Corpus {
        manifest: Manifest::new(records)?,
        images,
        styles,
        subjects,
        warnings,
    })
}

/// Fresh subjects for training the identity encoder, disjoint from the main
/// corpus. Each subject gets `styles_per_subject` renders, each with its own
/// style, at ages drawn from a window of `age_window` years.
pub fn generate_encoder_corpus(
    n_subjects: usize,
    styles_per_subject: usize,
    age_window: f32,
    seed: u64,
) -> Result<Corpus, WorldError> {
    if n_subjects < 2 || styles_per_subject == 0 {
        return Err(WorldError::Config(
            "encoder corpus needs 2+ subjects and 1+ style".into(),
        ));
    }
    let mut records = Vec::new();
    let mut images = Vec::new();
    let mut styles = Vec::new();
    let mut subjects = Vec::with_capacity(n_subjects);
    for i in 0..n_subjects {
        let id = format!("e{i:04}");
        let spec = SubjectSpec::sample(derive_seed(seed, ENCODER_STREAM, i as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(spec.birth_seed ^ 0x5EED);
        let window = age_window.clamp(0.0, AGE_MAX - AGE_MIN);
        let base = rng.gen_range(AGE_MIN..=AGE_MAX - window);
        for j in 0..styles_per_subject {
            let age = ((base + rng.gen_range(0.0..=window)) * 100.0).round() / 100.0;
            let style = StyleSpec::sample(&mut rng);
            images.push(render(&spec, age, &style, &id)?);
            records.push(ManifestRecord {
                subject_id: id.clone(),
                age,
                style_id: style.label(),
                split: Split::Train,
                path: format!("images/{id}_{j}.ppm"),
            });
            styles.push(style);
        }
        subjects.push((id, spec));
    }
    Ok(Corpus {
        manifest: Manifest::new(records)?,
        images,
        styles,
        subjects,
        warnings: Vec::new(),
    })
}

/// Fresh subjects rendered at every age in `ages` under one style per
/// subject, for measuring how mean features move with age.
pub fn generate_drift_corpus(
    n_subjects: usize,
    ages: &[f32],
    seed: u64,
) -> Result<Corpus, WorldError> {
    if n_subjects == 0 || ages.len() < 2 {
        return Err(WorldError::Config(
            "drift corpus needs 1+ subject and 2+ ages".into(),
        ));
    }
    if let Some(&a) = ages.iter().find(|&&a| !(AGE_MIN..=AGE_MAX).contains(&a)) {
        return Err(WorldError::AgeOutOfRange(a));
    }
    let mut records = Vec::new();
    let mut images = Vec::new();
    let mut styles = Vec::new();
    let mut subjects = Vec::with_capacity(n_subjects);
    for i in 0..n_subjects {
        let id = format!("d{i:04}");
        let spec = SubjectSpec::sample(derive_seed(seed, DRIFT_STREAM, i as u64));
        let style = StyleSpec::sample(&mut ChaCha8Rng::seed_from_u64(spec.birth_seed ^ 0xD41F));
        for (j, &age) in ages.iter().enumerate() {
            images.push(render(&spec, age, &style, &id)?);
            records.push(ManifestRecord {
                subject_id: id.clone(),
                age,
                style_id: style.label(),
                split: Split::Test,
                path: format!("images/{id}_{j}.ppm"),
            });
            styles.push(style.clone());
        }
        subjects.push((id, spec));
    }
    Ok(Corpus {
        manifest: Manifest::new(records)?,
        images,
        styles,
        subjects,
        warnings: Vec::new(),
    })
}
