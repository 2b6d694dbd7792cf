//! Identity encoder, style encoder and decoder, and the identity-preserving
//! reconstruction objective used to render aged faces.

mod encoder;
mod network;
mod train;

use thiserror::Error;

pub use encoder::{train_id_encoder, IdEncoder, IdEncoderConfig, LossHistory};
pub use network::Generator;
pub use train::{
    generator_loss, synthesize_aged, synthesize_aged_batch, train_generator, GeneratorConfig,
    LossBreakdown, LossWeights,
};

use crate::dataio::{DataError, ImageSample, CHANNELS, HEIGHT, WIDTH};
use crate::fam::FamError;
use crate::numgrad::{GradError, Tensor};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fam(#[from] FamError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what} training diverged at step {step} (non-finite loss)")]
    Diverged { what: &'static str, step: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
}

/// Packs images into an `n×32×32×3` tensor.
pub fn stack_images(images: &[&ImageSample]) -> Result<Tensor<f32>, GeneratorError> {
    if images.is_empty() {
        return Err(GeneratorError::EmptyBatch);
    }
    let mut data = Vec::with_capacity(images.len() * HEIGHT * WIDTH * CHANNELS);
    for img in images {
        if img.dims() != (HEIGHT, WIDTH, CHANNELS) {
            return Err(GeneratorError::Dimension {
                expected: HEIGHT * WIDTH * CHANNELS,
                found: img.pixels().len(),
            });
        }
        data.extend_from_slice(img.pixels());
    }
    Ok(Tensor::new(
        vec![images.len(), HEIGHT, WIDTH, CHANNELS],
        data,
    )?)
}

#[cfg(test)]
mod tests;
