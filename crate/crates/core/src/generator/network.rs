use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{stack_images, GeneratorError, LossWeights};
use crate::dataio::{
    Checkpoint, CheckpointMeta, ImageSample, NetworkKind, CHANNELS, HEIGHT, WIDTH,
};
use crate::numgrad::{uniform_fan_in, Bound, ParamSet, Tape, Tensor, Var, LEAKY_SLOPE};

const STYLE_CONVS: [(usize, usize); 4] = [(3, 16), (16, 32), (32, 64), (64, 64)];
const STYLE_FLAT: usize = (HEIGHT / 16) * (WIDTH / 16) * 64;
const SEED_SIDE: usize = HEIGHT / 16;
const SEED_CHANNELS: usize = 128;
const DECONVS: [(usize, usize); 4] = [(128, 64), (64, 32), (32, 16), (16, CHANNELS)];
const INFER_CHUNK: usize = 128;

/// Style encoder (four stride-2 convolutions and a projection to `k`) and
/// decoder (projection of `style ⊕ id` to a 2×2×128 seed, four stride-2
/// transposed convolutions, logistic output).
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    params: ParamSet<f32>,
    d: usize,
    k: usize,
    weights: LossWeights,
}

impl Generator {
    pub fn init<R: Rng>(rng: &mut R, d: usize, k: usize, weights: LossWeights) -> Self {
        let mut params = ParamSet::new();
        if k > 0 {
            for (i, (ci, co)) in STYLE_CONVS.into_iter().enumerate() {
                params.insert(
                    format!("style.conv{}.k", i + 1),
                    uniform_fan_in(rng, &[3, 3, ci, co], 9 * ci),
                );
                params.insert(
                    format!("style.conv{}.b", i + 1),
                    uniform_fan_in(rng, &[co], 9 * ci),
                );
            }
            params.insert(
                "style.fc.w",
                uniform_fan_in(rng, &[STYLE_FLAT, k], STYLE_FLAT),
            );
            params.insert("style.fc.b", uniform_fan_in(rng, &[k], STYLE_FLAT));
        }
        let seed = SEED_SIDE * SEED_SIDE * SEED_CHANNELS;
        params.insert("dec.fc.w", uniform_fan_in(rng, &[k + d, seed], k + d));
        params.insert("dec.fc.b", uniform_fan_in(rng, &[seed], k + d));
        for (i, (ci, co)) in DECONVS.into_iter().enumerate() {
            // a stride-2 transposed 3×3 kernel reaches each output from ~9/4 inputs
            let fan_in = 9 * ci / 4;
            params.insert(
                format!("dec.tconv{}.k", i + 1),
                uniform_fan_in(rng, &[3, 3, ci, co], fan_in),
            );
            params.insert(
                format!("dec.tconv{}.b", i + 1),
                uniform_fan_in(rng, &[co], fan_in),
            );
        }
        Self {
            params,
            d,
            k,
            weights,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    /// `n×32×32×3` images to `n×k` style vectors; `None` when `k = 0`.
    pub fn forward_style(
        &self,
        tape: &mut Tape<f32>,
        bound: &Bound,
        x: Var,
    ) -> Result<Option<Var>, GeneratorError> {
        if self.k == 0 {
            return Ok(None);
        }
        let n = tape.value(x)?.shape()[0];
        let mut h = x;
        for i in 1..=STYLE_CONVS.len() {
            h = tape.conv2d(h, bound.get(&format!("style.conv{i}.k"))?, 2)?;
            h = tape.bias_add(h, bound.get(&format!("style.conv{i}.b"))?)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let h = tape.reshape(h, &[n, STYLE_FLAT])?;
        Ok(Some(tape.affine(
            h,
            bound.get("style.fc.w")?,
            bound.get("style.fc.b")?,
        )?))
    }

    /// Decodes `style ⊕ id` (`n×k`, `n×d`) into `n×32×32×3` images in `(0,1)`.
    pub fn forward_decode(
        &self,
        tape: &mut Tape<f32>,
        bound: &Bound,
        style: Option<Var>,
        id: Var,
    ) -> Result<Var, GeneratorError> {
        let n = tape.value(id)?.shape()[0];
        let z = match style {
            Some(s) => tape.concat(&[s, id])?,
            None => id,
        };
        let h = tape.affine(z, bound.get("dec.fc.w")?, bound.get("dec.fc.b")?)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let mut h = tape.reshape(h, &[n, SEED_SIDE, SEED_SIDE, SEED_CHANNELS])?;
        for i in 1..=DECONVS.len() {
            h = tape.conv2d_transpose(h, bound.get(&format!("dec.tconv{i}.k"))?, 2)?;
            h = tape.bias_add(h, bound.get(&format!("dec.tconv{i}.b"))?)?;
            if i < DECONVS.len() {
                h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        Ok(tape.sigmoid(h)?)
    }

    pub fn encode_styles(&self, images: &[&ImageSample]) -> Result<Vec<Vec<f32>>, GeneratorError> {
        if self.k == 0 {
            return Ok(vec![Vec::new(); images.len()]);
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false)?;
            let x = tape.constant(stack_images(chunk)?)?;
            let s = self.forward_style(&mut tape, &bound, x)?.expect("k > 0");
            let s = tape.value(s)?;
            out.extend((0..chunk.len()).map(|i| s.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn encode_style(&self, image: &ImageSample) -> Result<Vec<f32>, GeneratorError> {
        Ok(self.encode_styles(&[image])?.remove(0))
    }

    /// Decodes paired style and identity vectors. Output images carry an
    /// empty subject and age 0; callers relabel them.
    pub fn decode_batch(
        &self,
        styles: &[&[f32]],
        ids: &[&[f32]],
    ) -> Result<Vec<ImageSample>, GeneratorError> {
        if styles.len() != ids.len() {
            return Err(GeneratorError::Dimension {
                expected: ids.len(),
                found: styles.len(),
            });
        }
        for s in styles {
            if s.len() != self.k {
                return Err(GeneratorError::Dimension {
                    expected: self.k,
                    found: s.len(),
                });
            }
        }
        for v in ids {
            if v.len() != self.d {
                return Err(GeneratorError::Dimension {
                    expected: self.d,
                    found: v.len(),
                });
            }
        }
        let mut out = Vec::with_capacity(ids.len());
        let per = HEIGHT * WIDTH * CHANNELS;
        for start in (0..ids.len()).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(ids.len());
            let n = end - start;
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false)?;
            let style = if self.k > 0 {
                Some(tape.constant(Tensor::new(vec![n, self.k], styles[start..end].concat())?)?)
            } else {
                None
            };
            let id = tape.constant(Tensor::new(vec![n, self.d], ids[start..end].concat())?)?;
            let img = self.forward_decode(&mut tape, &bound, style, id)?;
            let data = tape.value(img)?.data();
            for i in 0..n {
                out.push(ImageSample::new(
                    "",
                    0.0,
                    "decoded",
                    (HEIGHT, WIDTH, CHANNELS),
                    data[i * per..(i + 1) * per].to_vec(),
                )?);
            }
        }
        Ok(out)
    }

    pub fn decode(&self, style: &[f32], id: &[f32]) -> Result<ImageSample, GeneratorError> {
        Ok(self.decode_batch(&[style], &[id])?.remove(0))
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            kind: NetworkKind::Generator,
            meta: CheckpointMeta {
                d: self.d as u32,
                k: self.k as u32,
                height: HEIGHT as u32,
                width: WIDTH as u32,
                lambda_id: self.weights.id,
                lambda_pix: self.weights.pix,
                lambda_tv: self.weights.tv,
            },
            config_hash: config_hash.to_string(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, GeneratorError> {
        let ckpt = ckpt.expect_kind(NetworkKind::Generator)?;
        let m = ckpt.meta;
        let weights = LossWeights {
            id: m.lambda_id,
            pix: m.lambda_pix,
            tv: m.lambda_tv,
        };
        let reference = Self::init(
            &mut ChaCha8Rng::seed_from_u64(0),
            m.d as usize,
            m.k as usize,
            weights,
        );
        if reference.params.len() != ckpt.params.len() {
            return Err(GeneratorError::Config(format!(
                "generator checkpoint has {} tensors, expected {}",
                ckpt.params.len(),
                reference.params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            ckpt.check_shape(name, t.shape())?;
        }
        Ok(Self {
            params: ckpt.params,
            d: m.d as usize,
            k: m.k as usize,
            weights,
        })
    }
}
