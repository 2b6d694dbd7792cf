//! Deep-feature age progression.
//!
//! A feature aging module maps a face embedding from its enrollment age to a
//! target age; an identity-preserving generator renders images from style and
//! identity vectors; longitudinal search protocols measure whether aging the
//! gallery improves rank-1 identification. Everything runs on a deterministic
//! synthetic longitudinal face world.

pub mod cli;
pub mod dataio;
pub mod eval;
pub mod fam;
pub mod generator;
pub mod numgrad;
pub mod pipeline;
pub mod synthworld;
