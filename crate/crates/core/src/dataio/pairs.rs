use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::Manifest;
use super::DataError;

/// Two records of one subject at different ages; `source` is aged toward `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct GenuinePair {
    pub subject_id: String,
    pub source: usize,
    pub target: usize,
    pub source_age: f32,
    pub target_age: f32,
}

/// Uniform sampler over subjects with at least two distinct ages.
#[derive(Clone, Debug)]
pub struct PairSampler {
    // (subject, [(record index, age)])
    subjects: Vec<(String, Vec<(usize, f32)>)>,
}

impl PairSampler {
    pub fn new(manifest: &Manifest) -> Result<Self, DataError> {
        let mut subjects = Vec::new();
        for (s, idx) in manifest.by_subject() {
            let items: Vec<(usize, f32)> = idx
                .iter()
                .map(|&i| (i, manifest.records()[i].age))
                .collect();
            let first = items[0].1;
            if items.iter().any(|&(_, a)| a != first) {
                subjects.push((s, items));
            }
        }
        if subjects.is_empty() {
            return Err(DataError::NoGenuinePairs);
        }
        Ok(Self { subjects })
    }

    pub fn num_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Uniform subject, then a uniform record, then a uniform record of a
    /// different age. Both directions (progression and regression) occur.
    pub fn sample<R: Rng>(&self, rng: &mut R, batch: usize) -> Vec<GenuinePair> {
        (0..batch)
            .map(|_| {
                let (subject, items) = &self.subjects[rng.gen_range(0..self.subjects.len())];
                let (src, src_age) = items[rng.gen_range(0..items.len())];
                let others: Vec<&(usize, f32)> =
                    items.iter().filter(|(_, a)| *a != src_age).collect();
                let &(dst, dst_age) = others[rng.gen_range(0..others.len())];
                GenuinePair {
                    subject_id: subject.clone(),
                    source: src,
                    target: dst,
                    source_age: src_age,
                    target_age: dst_age,
                }
            })
            .collect()
    }

    /// Every ordered genuine pair, in manifest order.
    pub fn all_pairs(&self) -> Vec<GenuinePair> {
        let mut out = Vec::new();
        for (subject, items) in &self.subjects {
            for &(s, sa) in items {
                for &(t, ta) in items {
                    if sa != ta {
                        out.push(GenuinePair {
                            subject_id: subject.clone(),
                            source: s,
                            target: t,
                            source_age: sa,
                            target_age: ta,
                        });
                    }
                }
            }
        }
        out
    }
}

pub fn sample_genuine_pairs(
    manifest: &Manifest,
    rng_seed: u64,
    batch: usize,
) -> Result<Vec<GenuinePair>, DataError> {
    let sampler = PairSampler::new(manifest)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(sampler.sample(&mut rng, batch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{ManifestRecord, Split};

    fn manifest(items: &[(&str, f32)]) -> Manifest {
        Manifest::new(
            items
                .iter()
                .enumerate()
                .map(|(i, &(s, a))| ManifestRecord {
                    subject_id: s.into(),
                    age: a,
                    style_id: "st0".into(),
                    split: Split::Train,
                    path: format!("{i}.ppm"),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn both_directions_reachable() {
        let m = manifest(&[("a", 2.0), ("a", 7.0), ("b", 4.0)]);
        let pairs = sample_genuine_pairs(&m, 3, 200).unwrap();
        assert!(pairs.iter().all(|p| p.subject_id == "a"));
        assert!(pairs
            .iter()
            .any(|p| p.source_age == 2.0 && p.target_age == 7.0));
        assert!(pairs
            .iter()
            .any(|p| p.source_age == 7.0 && p.target_age == 2.0));
    }

    #[test]
    fn deterministic_under_seed() {
        let m = manifest(&[("a", 2.0), ("a", 7.0), ("b", 4.0), ("b", 9.0), ("b", 12.0)]);
        assert_eq!(
            sample_genuine_pairs(&m, 11, 64).unwrap(),
            sample_genuine_pairs(&m, 11, 64).unwrap()
        );
    }

    #[test]
    fn single_image_subjects_never_qualify() {
        // "c" has two images but only one distinct age
        let m = manifest(&[("a", 2.0), ("b", 4.0), ("c", 5.0), ("c", 5.0)]);
        assert!(matches!(
            sample_genuine_pairs(&m, 1, 4),
            Err(DataError::NoGenuinePairs)
        ));
    }
}
