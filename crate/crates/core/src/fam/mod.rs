//! Feature aging: a two-layer age-conditioned map on the embedding sphere.
//!
//! Input is `vector ⊕ e/20 ⊕ t/20`; the first layer maps `d+2 → d`, a leaky
//! ReLU follows, the second layer maps `d → d`, and the result is projected
//! back to unit length.

mod probe;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use probe::{feature_difference_probe, DifferenceProbe};

use crate::dataio::{
    Checkpoint, CheckpointMeta, DataError, FaceEmbedding, Manifest, NetworkKind, PairSampler,
};
use crate::numgrad::{
    AdamConfig, AdamState, Bound, GradError, ParamSet, Tape, Tensor, Var, LEAKY_SLOPE,
};
use crate::synthworld::{AGE_MAX, AGE_MIN};

/// Ages are divided by this before entering the network.
pub const AGE_SCALE: f32 = 20.0;

const INIT_LIFT: f32 = 1.0;

#[derive(Debug, Error)]
pub enum FamError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("dimension mismatch: network expects d={expected}, embedding has {found}")]
    Dimension { expected: usize, found: usize },
    #[error("age {0} outside [2, 20]")]
    AgeOutOfRange(f32),
    #[error("empty batch")]
    EmptyBatch,
    #[error("pair mixes subjects {0} and {1}")]
    NotGenuine(String, String),
    #[error("non-finite aged feature for subject {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}; last finite parameters kept")]
    Diverged {
        step: usize,
        last_good: Box<FamParams>,
    },
}

/// Enrollment age `e` and target age `t`, in years.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgePair {
    pub enrollment: f32,
    pub target: f32,
}

impl AgePair {
    pub fn new(enrollment: f32, target: f32) -> Result<Self, FamError> {
        for a in [enrollment, target] {
            if !(AGE_MIN..=AGE_MAX).contains(&a) {
                return Err(FamError::AgeOutOfRange(a));
            }
        }
        Ok(Self { enrollment, target })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamParams {
    params: ParamSet<f32>,
    d: usize,
}

impl FamParams {
    /// Near-identity initialization: `[I | 0]` and `I` plus uniform noise of
    /// half-width `noise`. The first bias lifts unit-vector inputs into the
    /// linear part of the leaky ReLU and the second removes the lift again.
    pub fn identity_init<R: Rng>(rng: &mut R, d: usize, noise: f32) -> Self {
        let mut jitter = |shape: &[usize], f: &dyn Fn(usize, usize) -> f32| {
            let cols = shape[1];
            Tensor::from_fn(shape, |i| {
                let n = if noise > 0.0 {
                    rng.gen_range(-noise..noise)
                } else {
                    0.0
                };
                f(i / cols, i % cols) + n
            })
        };
        let eye = |r: usize, c: usize| if r == c { 1.0 } else { 0.0 };
        let mut params = ParamSet::new();
        params.insert("fam.l1.w", jitter(&[d + 2, d], &eye));
        params.insert("fam.l1.b", Tensor::full(&[d], INIT_LIFT));
        let w2 = jitter(&[d, d], &eye);
        let b2 = Tensor::from_fn(&[d], |c| {
            -INIT_LIFT * (0..d).map(|r| w2.data()[r * d + c]).sum::<f32>()
        });
        params.insert("fam.l2.w", w2);
        params.insert("fam.l2.b", b2);
        Self { params, d }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    /// Records the map for `x: n×d` and normalized ages `ages: n×2`.
    pub fn forward(
        tape: &mut Tape<f32>,
        bound: &Bound,
        x: Var,
        ages: Var,
    ) -> Result<Var, FamError> {
        let input = tape.concat(&[x, ages])?;
        let h = tape.affine(input, bound.get("fam.l1.w")?, bound.get("fam.l1.b")?)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let y = tape.affine(h, bound.get("fam.l2.w")?, bound.get("fam.l2.b")?)?;
        Ok(tape.l2_normalize(y)?)
    }

    /// Ages a batch of raw unit vectors; `ages[i]` applies to `vectors[i]`.
    pub fn age_vectors(
        &self,
        vectors: &[&[f32]],
        ages: &[AgePair],
    ) -> Result<Vec<Vec<f32>>, FamError> {
        if vectors.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != self.d) {
            return Err(FamError::Dimension {
                expected: self.d,
                found: v.len(),
            });
        }
        let n = vectors.len();
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false)?;
        let x = tape.constant(Tensor::new(vec![n, self.d], vectors.concat())?)?;
        let a = tape.constant(age_tensor(ages)?)?;
        let y = Self::forward(&mut tape, &bound, x, a)?;
        let y = tape.value(y)?;
        Ok((0..n).map(|i| y.row(i).to_vec()).collect())
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            kind: NetworkKind::Fam,
            meta: CheckpointMeta {
                d: self.d as u32,
                ..CheckpointMeta::default()
            },
            config_hash: config_hash.to_string(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, FamError> {
        let ckpt = ckpt.expect_kind(NetworkKind::Fam)?;
        let d = ckpt.meta.d as usize;
        let reference = Self::identity_init(&mut ChaCha8Rng::seed_from_u64(0), d, 0.0);
        for (name, t) in reference.params.iter() {
            ckpt.check_shape(name, t.shape())?;
        }
        if !ckpt.params.all_finite() {
            return Err(FamError::Grad(GradError::NonFinite(
                "fam checkpoint".into(),
            )));
        }
        Ok(Self {
            params: ckpt.params,
            d,
        })
    }
}

fn age_tensor(ages: &[AgePair]) -> Result<Tensor<f32>, FamError> {
    let data = ages
        .iter()
        .flat_map(|a| [a.enrollment / AGE_SCALE, a.target / AGE_SCALE])
        .collect();
    Ok(Tensor::new(vec![ages.len(), 2], data)?)
}

/// Ages one embedding from `ages.enrollment` to `ages.target`; the result
/// keeps the subject and carries the target age.
pub fn age_feature(
    params: &FamParams,
    embedding: &FaceEmbedding,
    ages: AgePair,
) -> Result<FaceEmbedding, FamError> {
    if embedding.dim() != params.d {
        return Err(FamError::Dimension {
            expected: params.d,
            found: embedding.dim(),
        });
    }
    let y = params
        .age_vectors(&[embedding.vector()], &[ages])?
        .remove(0);
    if y.iter().any(|v| !v.is_finite()) {
        return Err(FamError::NonFinite(embedding.subject_id.clone()));
    }
    Ok(FaceEmbedding::normalized(
        embedding.subject_id.clone(),
        ages.target,
        y,
    )?)
}

/// A genuine pair of embeddings; `source` is aged toward `target.age`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPair {
    pub source: FaceEmbedding,
    pub target: FaceEmbedding,
}

/// Mean over pairs of `‖FAM(source, e, t) − target‖²`.
pub fn fam_loss(params: &FamParams, batch: &[EmbeddingPair]) -> Result<f32, FamError> {
    if batch.is_empty() {
        return Err(FamError::EmptyBatch);
    }
    if let Some(p) = batch
        .iter()
        .find(|p| p.source.subject_id != p.target.subject_id)
    {
        return Err(FamError::NotGenuine(
            p.source.subject_id.clone(),
            p.target.subject_id.clone(),
        ));
    }
    let sources: Vec<&[f32]> = batch.iter().map(|p| p.source.vector()).collect();
    let ages = batch
        .iter()
        .map(|p| AgePair::new(p.source.age, p.target.age))
        .collect::<Result<Vec<_>, _>>()?;
    let aged = params.age_vectors(&sources, &ages)?;
    let total: f64 = aged
        .iter()
        .zip(batch)
        .map(|(a, p)| {
            a.iter()
                .zip(p.target.vector())
                .map(|(&x, &y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok((total / batch.len() as f64) as f32)
}

/// Same loss for the identity map (no aging).
pub fn identity_loss(batch: &[EmbeddingPair]) -> Result<f32, FamError> {
    if batch.is_empty() {
        return Err(FamError::EmptyBatch);
    }
    let total: f64 = batch
        .iter()
        .map(|p| {
            p.source
                .vector()
                .iter()
                .zip(p.target.vector())
                .map(|(&x, &y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok((total / batch.len() as f64) as f32)
}

/// Every ordered genuine pair of `manifest` (records aligned with `embeddings`).
pub fn embedding_pairs(
    manifest: &Manifest,
    embeddings: &[FaceEmbedding],
) -> Result<Vec<EmbeddingPair>, FamError> {
    check_aligned(manifest, embeddings)?;
    Ok(PairSampler::new(manifest)?
        .all_pairs()
        .into_iter()
        .map(|p| EmbeddingPair {
            source: embeddings[p.source].clone(),
            target: embeddings[p.target].clone(),
        })
        .collect())
}

fn check_aligned(manifest: &Manifest, embeddings: &[FaceEmbedding]) -> Result<(), FamError> {
    if manifest.len() != embeddings.len() {
        return Err(FamError::Config(format!(
            "{} manifest records but {} embeddings",
            manifest.len(),
            embeddings.len()
        )));
    }
    for (r, e) in manifest.records().iter().zip(embeddings) {
        if r.subject_id != e.subject_id || r.age != e.age {
            return Err(FamError::Config(format!(
                "embedding ({}, {}) does not match record ({}, {})",
                e.subject_id, e.age, r.subject_id, r.age
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamConfig {
    pub iterations: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Half-width of the uniform noise added to the identity initialization.
    pub init_noise: f32,
    pub seed: u64,
}

/// Desk-scale learning rate; 20k steps at the paper rate leave the map underfit.
pub const DESK_FAM_LR: f64 = 5e-3;

impl Default for FamConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch: 64,
            adam: AdamConfig {
                learning_rate: DESK_FAM_LR,
                ..AdamConfig::default()
            },
            init_noise: 0.01,
            seed: 23,
        }
    }
}

impl FamConfig {
    pub fn paper() -> Self {
        Self {
            iterations: 200_000,
            adam: AdamConfig::default(),
            ..Self::default()
        }
    }
}

/// Standalone training on genuine pairs drawn from `manifest` (records
/// aligned with `embeddings`). Returns the parameters and per-step loss.
pub fn train_fam(
    config: &FamConfig,
    manifest: &Manifest,
    embeddings: &[FaceEmbedding],
) -> Result<(FamParams, Vec<f32>), FamError> {
    if config.batch == 0 {
        return Err(FamError::Config("batch must be positive".into()));
    }
    check_aligned(manifest, embeddings)?;
    let d = embeddings
        .first()
        .map(FaceEmbedding::dim)
        .ok_or(FamError::EmptyBatch)?;
    if let Some(e) = embeddings.iter().find(|e| e.dim() != d) {
        return Err(FamError::Dimension {
            expected: d,
            found: e.dim(),
        });
    }
    let sampler = PairSampler::new(manifest)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut fam = FamParams::identity_init(&mut rng, d, config.init_noise);
    let mut adam = AdamState::new(config.adam)?;
    let mut history = Vec::with_capacity(config.iterations);
    for step in 0..config.iterations {
        let pairs = sampler.sample(&mut rng, config.batch);
        let mut src = Vec::with_capacity(pairs.len() * d);
        let mut dst = Vec::with_capacity(pairs.len() * d);
        let mut ages = Vec::with_capacity(pairs.len());
        for p in &pairs {
            src.extend_from_slice(embeddings[p.source].vector());
            dst.extend_from_slice(embeddings[p.target].vector());
            ages.push(AgePair::new(p.source_age, p.target_age)?);
        }
        let diverged = |fam: &FamParams| FamError::Diverged {
            step,
            last_good: Box::new(fam.clone()),
        };
        let mut tape = Tape::new();
        let loss = match batch_loss(&mut tape, &fam, src, dst, &ages) {
            Ok(l) => l,
            Err(FamError::Grad(GradError::NonFinite(_))) => return Err(diverged(&fam)),
            Err(e) => return Err(e),
        };
        let value = tape.value(loss)?.item();
        if !value.is_finite() {
            return Err(diverged(&fam));
        }
        let grads = tape.backward(loss)?;
        let before = fam.clone();
        if adam.step(&mut fam.params, &grads).is_err() || !fam.params.all_finite() {
            return Err(diverged(&before));
        }
        history.push(value);
    }
    Ok((fam, history))
}

fn batch_loss(
    tape: &mut Tape<f32>,
    fam: &FamParams,
    src: Vec<f32>,
    dst: Vec<f32>,
    ages: &[AgePair],
) -> Result<Var, FamError> {
    let (n, d) = (ages.len(), fam.d);
    let bound = fam.params.bind(tape, true)?;
    let x = tape.constant(Tensor::new(vec![n, d], src)?)?;
    let y = tape.constant(Tensor::new(vec![n, d], dst)?)?;
    let a = tape.constant(age_tensor(ages)?)?;
    let aged = FamParams::forward(tape, &bound, x, a)?;
    Ok(tape.squared_distance_mean(aged, y)?)
}

/// Trailing moving average with the given window (shorter at the start).
pub fn moving_average(values: &[f32], window: usize) -> Vec<f32> {
    let w = window.max(1);
    let mut acc = 0.0f64;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            acc += v as f64;
            if i >= w {
                acc -= values[i - w] as f64;
            }
            (acc / (i + 1).min(w) as f64) as f32
        })
        .collect()
}

#[cfg(test)]
mod tests;
