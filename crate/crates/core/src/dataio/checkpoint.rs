use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{put_string, read_file, write_file, ByteReader, DataError};
use crate::numgrad::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FAGECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetworkKind {
    Fam,
    IdEncoder,
    Generator,
}

impl NetworkKind {
    pub fn tag(self) -> &'static str {
        match self {
            NetworkKind::Fam => "fam",
            NetworkKind::IdEncoder => "idenc",
            NetworkKind::Generator => "gen",
        }
    }
}

impl fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for NetworkKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "fam" => Ok(NetworkKind::Fam),
            "idenc" => Ok(NetworkKind::IdEncoder),
            "gen" | "generator" => Ok(NetworkKind::Generator),
            other => Err(DataError::Corrupt {
                what: "checkpoint",
                detail: format!("unknown network kind {other:?}"),
            }),
        }
    }
}

/// Hyperparameter block stored with every checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub d: u32,
    pub k: u32,
    pub height: u32,
    pub width: u32,
    pub lambda_id: f64,
    pub lambda_pix: f64,
    pub lambda_tv: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: NetworkKind,
    pub meta: CheckpointMeta,
    /// Hash of the resolved run configuration that produced the weights.
    pub config_hash: String,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn expect_kind(self, kind: NetworkKind) -> Result<Self, DataError> {
        if self.kind != kind {
            return Err(DataError::KindMismatch {
                expected: kind.to_string(),
                found: self.kind.to_string(),
            });
        }
        Ok(self)
    }

    /// Fails unless tensor `name` exists with exactly `shape`.
    pub fn check_shape(&self, name: &str, shape: &[usize]) -> Result<(), DataError> {
        let t = self.params.get(name).map_err(|_| DataError::TensorShape {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: vec![],
        })?;
        if t.shape() != shape {
            return Err(DataError::TensorShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, DataError> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_string(&mut out, self.kind.tag())?;
        let m = &self.meta;
        for v in [m.d, m.k, m.height, m.width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [m.lambda_id, m.lambda_pix, m.lambda_tv] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_string(&mut out, &self.config_hash)?;
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_string(&mut out, name)?;
            out.push(t.shape().len() as u8);
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self, DataError> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(8).map_err(|_| DataError::BadMagic(origin.into()))? != CHECKPOINT_MAGIC {
            return Err(DataError::BadMagic(origin.into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(DataError::Version {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let kind: NetworkKind = r.string()?.parse()?;
        let meta = CheckpointMeta {
            d: r.u32()?,
            k: r.u32()?,
            height: r.u32()?,
            width: r.u32()?,
            lambda_id: r.f64()?,
            lambda_pix: r.f64()?,
            lambda_tv: r.f64()?,
        };
        let config_hash = r.string()?;
        let n = r.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r.take(count * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| DataError::Corrupt {
                what: "checkpoint",
                detail: format!("tensor {name}: {e}"),
            })?;
            params.insert(name, t);
        }
        if r.remaining() != 0 {
            return Err(DataError::Corrupt {
                what: "checkpoint",
                detail: format!("{} trailing bytes", r.remaining()),
            });
        }
        Ok(Self {
            kind,
            meta,
            config_hash,
            params,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), DataError> {
    write_file(path, &ckpt.encode()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    Checkpoint::decode(&read_file(path)?, path)
}
