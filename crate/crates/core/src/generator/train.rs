use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{stack_images, Generator, GeneratorError, IdEncoder};
use crate::dataio::ImageSample;
use crate::fam::{AgePair, FamParams};
use crate::numgrad::{AdamConfig, AdamState, Bound, Tape, Tensor, Var};

/// Relative weights of the identity, pixel and total-variation terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub id: f64,
    pub pix: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            id: 1.0,
            pix: 10.0,
            tv: 1e-4,
        }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<(), GeneratorError> {
        if [self.id, self.pix, self.tv]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        {
            Ok(())
        } else {
            Err(GeneratorError::Config(format!(
                "loss weights must be non-negative: {self:?}"
            )))
        }
    }
}

/// Unweighted terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f32,
    pub id: f32,
    pub pix: f32,
    pub tv: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub k: usize,
    pub iterations: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            k: 32,
            iterations: 1000,
            batch: 64,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            seed: 31,
        }
    }
}

struct Terms {
    total: Var,
    id: Option<Var>,
    pix: Var,
    tv: Var,
}

/// Records reconstruction of `x` from its own style and identity vector
/// `id_target`; the encoder pass is skipped when `skip_zero_id` and λ_ID = 0.
fn record_objective(
    generator: &Generator,
    tape: &mut Tape<f32>,
    gen_bound: &Bound,
    enc_bound: &Bound,
    x: Var,
    id_target: Var,
    skip_zero_id: bool,
) -> Result<Terms, GeneratorError> {
    let w = generator.weights();
    let style = generator.forward_style(tape, gen_bound, x)?;
    let recon = generator.forward_decode(tape, gen_bound, style, id_target)?;
    let id = if skip_zero_id && w.id == 0.0 {
        None
    } else {
        let re = IdEncoder::forward(tape, enc_bound, recon)?;
        Some(tape.squared_distance_mean(re, id_target)?)
    };
    let pix = tape.mean_abs_diff(recon, x)?;
    let tv = tape.total_variation(recon)?;
    let mut parts = vec![(pix, w.pix as f32), (tv, w.tv as f32)];
    if let Some(id) = id {
        parts.insert(0, (id, w.id as f32));
    }
    let total = tape.weighted_sum(&parts)?;
    Ok(Terms { total, id, pix, tv })
}

fn breakdown(tape: &Tape<f32>, t: &Terms) -> Result<LossBreakdown, GeneratorError> {
    Ok(LossBreakdown {
        total: tape.value(t.total)?.item(),
        id: t
            .id
            .map(|v| tape.value(v).map(|x| x.item()))
            .transpose()?
            .unwrap_or(0.0),
        pix: tape.value(t.pix)?.item(),
        tv: tape.value(t.tv)?.item(),
    })
}

/// Weighted objective on `images`, with identity targets from the frozen encoder.
pub fn generator_loss(
    generator: &Generator,
    encoder: &IdEncoder,
    images: &[&ImageSample],
) -> Result<LossBreakdown, GeneratorError> {
    if images.is_empty() {
        return Err(GeneratorError::EmptyBatch);
    }
    check_dims(generator, encoder)?;
    let ids = encoder.embed_vectors(images)?;
    let mut tape = Tape::new();
    let gb = generator.params().bind(&mut tape, false)?;
    let eb = encoder.params().bind(&mut tape, false)?;
    let x = tape.constant(stack_images(images)?)?;
    let id = tape.constant(Tensor::new(vec![images.len(), encoder.d()], ids.concat())?)?;
    let terms = record_objective(generator, &mut tape, &gb, &eb, x, id, false)?;
    breakdown(&tape, &terms)
}

fn check_dims(generator: &Generator, encoder: &IdEncoder) -> Result<(), GeneratorError> {
    if generator.d() != encoder.d() {
        return Err(GeneratorError::Dimension {
            expected: generator.d(),
            found: encoder.d(),
        });
    }
    Ok(())
}

/// Trains style encoder and decoder to reconstruct `images` from their own
/// style and identity vectors; the identity encoder stays frozen.
pub fn train_generator(
    images: &[ImageSample],
    encoder: &IdEncoder,
    config: &GeneratorConfig,
) -> Result<(Generator, Vec<LossBreakdown>), GeneratorError> {
    config.weights.validate()?;
    if images.is_empty() {
        return Err(GeneratorError::EmptyBatch);
    }
    if config.batch == 0 {
        return Err(GeneratorError::Config("batch must be positive".into()));
    }
    let refs: Vec<&ImageSample> = images.iter().collect();
    let ids = encoder.embed_vectors(&refs)?;
    let d = encoder.d();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut generator = Generator::init(&mut rng, d, config.k, config.weights);
    let mut adam = AdamState::new(config.adam)?;
    let mut history = Vec::with_capacity(config.iterations);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let batch = config.batch.min(images.len());
    for step in 0..config.iterations {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch_images: Vec<&ImageSample> = idx.iter().map(|&i| &images[i]).collect();
        let batch_ids: Vec<f32> = idx.iter().flat_map(|&i| ids[i].iter().copied()).collect();

        let mut tape = Tape::new();
        let gb = generator.params().bind(&mut tape, true)?;
        let eb = encoder.params().bind(&mut tape, false)?;
        let x = tape.constant(stack_images(&batch_images)?)?;
        let id = tape.constant(Tensor::new(vec![batch, d], batch_ids)?)?;
        let terms = record_objective(&generator, &mut tape, &gb, &eb, x, id, true)?;
        let b = breakdown(&tape, &terms)?;
        if !b.total.is_finite() {
            return Err(GeneratorError::Diverged {
                what: "generator",
                step,
            });
        }
        let grads = tape.backward(terms.total)?;
        adam.step(generator.params_mut(), &grads)?;
        history.push(b);
    }
    Ok((generator, history))
}

/// Renders `image` at `target_age`: its own style with its identity feature
/// aged from `image.age` to `target_age`.
pub fn synthesize_aged(
    fam: &FamParams,
    generator: &Generator,
    encoder: &IdEncoder,
    image: &ImageSample,
    target_age: f32,
) -> Result<ImageSample, GeneratorError> {
    Ok(synthesize_aged_batch(fam, generator, encoder, &[image], &[target_age])?.remove(0))
}

pub fn synthesize_aged_batch(
    fam: &FamParams,
    generator: &Generator,
    encoder: &IdEncoder,
    images: &[&ImageSample],
    target_ages: &[f32],
) -> Result<Vec<ImageSample>, GeneratorError> {
    check_dims(generator, encoder)?;
    if images.len() != target_ages.len() {
        return Err(GeneratorError::Dimension {
            expected: images.len(),
            found: target_ages.len(),
        });
    }
    let ages = images
        .iter()
        .zip(target_ages)
        .map(|(img, &t)| AgePair::new(img.age, t))
        .collect::<Result<Vec<_>, _>>()?;
    let ids = encoder.embed_vectors(images)?;
    let aged = fam.age_vectors(&ids.iter().map(Vec::as_slice).collect::<Vec<_>>(), &ages)?;
    let styles = generator.encode_styles(images)?;
    let out = generator.decode_batch(
        &styles.iter().map(Vec::as_slice).collect::<Vec<_>>(),
        &aged.iter().map(Vec::as_slice).collect::<Vec<_>>(),
    )?;
    Ok(out
        .into_iter()
        .zip(images.iter().zip(target_ages))
        .map(|(mut o, (img, &t))| {
            o.subject_id = img.subject_id.clone();
            o.age = t;
            o.style_id = img.style_id.clone();
            o
        })
        .collect())
}
