//! Deterministic synthetic longitudinal face world.
//!
//! Subjects carry fixed identity factors; an age curve grows the head and
//! shrinks the relative eye size; a style spec controls background, tint and
//! lighting. Every render is a pure function of (subject, age, style), so
//! every aging claim has a ground truth.

mod corpus;
mod render;

use thiserror::Error;

pub use corpus::{
    derive_seed, generate_corpus, generate_drift_corpus, generate_encoder_corpus, subject_spec,
    Corpus, CorpusConfig,
};
pub use render::{
    face_mask, render, AgeCurve, StyleSpec, SubjectSpec, IDENTITY_DIMS, IDENTITY_NAMES, STYLE_DIMS,
};

/// Corpus ages are drawn from this range (years).
pub const AGE_MIN: f32 = 2.0;
pub const AGE_MAX: f32 = 20.0;
/// Upper bound accepted by [`render`].
pub const RENDER_AGE_MAX: f32 = 26.0;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("age {0} outside the renderable range [2, 26]")]
    AgeOutOfRange(f32),
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
}
