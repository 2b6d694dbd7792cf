use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{stack_images, GeneratorError};
use crate::dataio::{
    Checkpoint, CheckpointMeta, FaceEmbedding, ImageSample, NetworkKind, HEIGHT, WIDTH,
};
use crate::numgrad::{
    uniform_fan_in, AdamConfig, AdamState, Bound, ParamSet, Tape, Tensor, Var, LEAKY_SLOPE,
};

const CONVS: [(&str, usize, usize); 3] = [
    ("idenc.conv1", 3, 16),
    ("idenc.conv2", 16, 32),
    ("idenc.conv3", 32, C3),
];
const C3: usize = 128;
const CELLS: usize = (HEIGHT / 8) * (WIDTH / 8);
const INFER_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdEncoderConfig {
    pub d: usize,
    pub iterations: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Multiplier on the cosine logits of the classification head.
    pub logit_scale: f32,
    pub seed: u64,
}

impl Default for IdEncoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            iterations: 1500,
            batch: 64,
            adam: AdamConfig {
                learning_rate: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            logit_scale: 16.0,
            seed: 11,
        }
    }
}

/// Convolutional identity encoder: three stride-2 3×3 convolutions, global
/// average pooling and a linear projection to a unit-norm `d`-vector.
#[derive(Clone, Debug, PartialEq)]
pub struct IdEncoder {
    params: ParamSet<f32>,
    d: usize,
}

impl IdEncoder {
    pub fn init<R: Rng>(rng: &mut R, d: usize) -> Self {
        let mut params = ParamSet::new();
        for (name, ci, co) in CONVS {
            params.insert(
                format!("{name}.k"),
                uniform_fan_in(rng, &[3, 3, ci, co], 9 * ci),
            );
            params.insert(format!("{name}.b"), uniform_fan_in(rng, &[co], 9 * ci));
        }
        params.insert("idenc.fc.w", uniform_fan_in(rng, &[C3, d], C3));
        params.insert("idenc.fc.b", uniform_fan_in(rng, &[d], C3));
        Self { params, d }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    /// Records the forward pass for an `n×32×32×3` batch, returning `n×d`
    /// unit rows.
    pub fn forward(tape: &mut Tape<f32>, bound: &Bound, x: Var) -> Result<Var, GeneratorError> {
        let n = tape.value(x)?.shape()[0];
        let mut h = x;
        for (name, _, _) in CONVS {
            h = tape.conv2d(h, bound.get(&format!("{name}.k"))?, 2)?;
            h = tape.bias_add(h, bound.get(&format!("{name}.b"))?)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        // global average over the 4×4 grid
        let h = tape.reshape(h, &[n, CELLS * C3])?;
        let pool = tape.constant(Tensor::from_fn(&[CELLS * C3, C3], |i| {
            if (i / C3) % C3 == i % C3 {
                1.0 / CELLS as f32
            } else {
                0.0
            }
        }))?;
        let h = tape.matmul(h, pool)?;
        let e = tape.affine(h, bound.get("idenc.fc.w")?, bound.get("idenc.fc.b")?)?;
        Ok(tape.l2_normalize(e)?)
    }

    /// Raw unit-norm vectors, one per image.
    pub fn embed_vectors(&self, images: &[&ImageSample]) -> Result<Vec<Vec<f32>>, GeneratorError> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false)?;
            let x = tape.constant(stack_images(chunk)?)?;
            let e = Self::forward(&mut tape, &bound, x)?;
            let v = tape.value(e)?;
            out.extend((0..chunk.len()).map(|i| v.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn encode(&self, images: &[&ImageSample]) -> Result<Vec<FaceEmbedding>, GeneratorError> {
        self.embed_vectors(images)?
            .into_iter()
            .zip(images)
            .map(|(v, img)| {
                Ok(FaceEmbedding::normalized(
                    img.subject_id.clone(),
                    img.age,
                    v,
                )?)
            })
            .collect()
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            kind: NetworkKind::IdEncoder,
            meta: CheckpointMeta {
                d: self.d as u32,
                height: HEIGHT as u32,
                width: WIDTH as u32,
                ..CheckpointMeta::default()
            },
            config_hash: config_hash.to_string(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, GeneratorError> {
        let ckpt = ckpt.expect_kind(NetworkKind::IdEncoder)?;
        let d = ckpt.meta.d as usize;
        let reference = Self::init(&mut ChaCha8Rng::seed_from_u64(0), d);
        for (name, t) in reference.params.iter() {
            ckpt.check_shape(name, t.shape())?;
        }
        Ok(Self {
            params: ckpt.params,
            d,
        })
    }
}

/// Loss history of a training run, one entry per iteration.
pub type LossHistory = Vec<f32>;

/// Trains the encoder as a subject classifier (scaled cosine softmax over
/// subject labels); the classification head is discarded afterwards.
pub fn train_id_encoder(
    images: &[ImageSample],
    config: &IdEncoderConfig,
) -> Result<(IdEncoder, LossHistory), GeneratorError> {
    let mut subjects: Vec<&str> = images.iter().map(|i| i.subject_id.as_str()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    if subjects.len() < 50 {
        return Err(GeneratorError::Config(format!(
            "encoder training needs at least 50 subjects, got {}",
            subjects.len()
        )));
    }
    if config.batch == 0 || config.d == 0 {
        return Err(GeneratorError::Config(
            "batch and d must be positive".into(),
        ));
    }
    let labels: Vec<usize> = images
        .iter()
        .map(|i| {
            subjects
                .binary_search(&i.subject_id.as_str())
                .expect("subject listed")
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let encoder = IdEncoder::init(&mut rng, config.d);
    let mut params = encoder.params;
    params.insert(
        "head.w",
        uniform_fan_in(&mut rng, &[config.d, subjects.len()], config.d),
    );
    let mut adam = AdamState::new(config.adam)?;
    let mut history = Vec::with_capacity(config.iterations);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    for step in 0..config.iterations {
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch.min(images.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let batch_images: Vec<&ImageSample> = batch.iter().map(|&i| &images[i]).collect();
        let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true)?;
        let x = tape.constant(stack_images(&batch_images)?)?;
        let e = IdEncoder::forward(&mut tape, &bound, x)?;
        let logits = tape.matmul(e, bound.get("head.w")?)?;
        let logits = tape.scale(logits, config.logit_scale)?;
        let loss = tape.softmax_cross_entropy(logits, &batch_labels)?;
        let value = tape.value(loss)?.item();
        if !value.is_finite() {
            return Err(GeneratorError::Diverged {
                what: "id encoder",
                step,
            });
        }
        let grads = tape.backward(loss)?;
        adam.step(&mut params, &grads)?;
        history.push(value);
    }
    let mut kept = ParamSet::new();
    for (name, t) in params.iter().filter(|(n, _)| n.starts_with("idenc.")) {
        kept.insert(name.clone(), t.clone());
    }
    Ok((
        IdEncoder {
            params: kept,
            d: config.d,
        },
        history,
    ))
}
