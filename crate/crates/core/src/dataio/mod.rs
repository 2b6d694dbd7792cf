//! Dataset manifests, binary embedding and image containers, model
//! checkpoints, and genuine-pair sampling.
//!
//! Every binary format is little-endian and starts with magic bytes and a
//! version; loaders reject versions they do not know.

mod checkpoint;
mod embedding;
mod image;
mod manifest;
mod pairs;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, NetworkKind};
pub use embedding::{
    decode_embeddings, encode_embeddings, read_embeddings, write_embeddings, FaceEmbedding,
    EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub use image::{
    decode_ppm, encode_ppm, encode_ppm_tagged, read_images, read_ppm, write_ppm, write_ppm_tagged,
    ImageSample, CHANNELS, HEIGHT, WIDTH,
};
pub use manifest::{load_manifest, save_manifest, Manifest, ManifestRecord, Split};
pub use pairs::{sample_genuine_pairs, GenuinePair, PairSampler};

/// Tolerance on `‖v‖₂ = 1` for stored embeddings.
pub const UNIT_NORM_TOL: f32 = 1e-4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt {what}: {detail}")]
    Corrupt { what: &'static str, detail: String },
    #[error("bad magic in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("checkpoint holds a {found} network, expected {expected}")]
    KindMismatch { expected: String, found: String },
    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("embedding for {subject} has norm {norm}, expected 1 ± 1e-4")]
    NotUnitNorm { subject: String, norm: f32 },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("no subject has two or more distinct ages")]
    NoGenuinePairs,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Little-endian reader over an in-memory buffer that reports truncation.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.buf.len() - self.pos < n {
            return Err(DataError::Corrupt {
                what: self.what,
                detail: format!("truncated at byte {} (needed {n} more)", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, DataError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Result<String, DataError> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| DataError::Corrupt {
            what: self.what,
            detail: format!("invalid utf-8 string: {e}"),
        })
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) -> Result<(), DataError> {
    let len = u16::try_from(s.len())
        .map_err(|_| DataError::Invalid(format!("string longer than 65535 bytes: {s:.32}…")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|e| DataError::io(path, e))
}

pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}
