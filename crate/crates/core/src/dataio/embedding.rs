use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{put_string, read_file, write_file, ByteReader, DataError, UNIT_NORM_TOL};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"FAEB";
pub const EMBEDDING_VERSION: u32 = 1;

/// Unit-norm face feature tagged with its subject and acquisition age.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceEmbedding {
    pub subject_id: String,
    pub age: f32,
    vector: Vec<f32>,
}

impl FaceEmbedding {
    /// Wraps an already unit-norm vector, rejecting anything off the sphere.
    pub fn new(
        subject_id: impl Into<String>,
        age: f32,
        vector: Vec<f32>,
    ) -> Result<Self, DataError> {
        let subject_id = subject_id.into();
        let norm = l2(&vector);
        if !(norm.is_finite() && (norm - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(DataError::NotUnitNorm {
                subject: subject_id,
                norm,
            });
        }
        check_age(age)?;
        Ok(Self {
            subject_id,
            age,
            vector,
        })
    }

    /// Projects `vector` onto the unit sphere.
    pub fn normalized(
        subject_id: impl Into<String>,
        age: f32,
        mut vector: Vec<f32>,
    ) -> Result<Self, DataError> {
        let subject_id = subject_id.into();
        let norm = l2(&vector);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(DataError::NotUnitNorm {
                subject: subject_id,
                norm,
            });
        }
        vector.iter_mut().for_each(|v| *v /= norm);
        Self::new(subject_id, age, vector)
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn with_age(mut self, age: f32) -> Self {
        self.age = age;
        self
    }
}

fn check_age(age: f32) -> Result<(), DataError> {
    if !(age.is_finite() && age >= 0.0) {
        return Err(DataError::Invalid(format!(
            "age {age} must be finite and ≥ 0"
        )));
    }
    Ok(())
}

fn l2(v: &[f32]) -> f32 {
    v.iter()
        .map(|x| (*x as f64) * (*x as f64))
        .sum::<f64>()
        .sqrt() as f32
}

/// Serializes to the `FAEB` container:
/// magic, u32 version, u32 d, u64 count, then per record
/// (u16 subject length, subject bytes, f32 age, d × f32).
pub fn encode_embeddings(items: &[FaceEmbedding]) -> Result<Vec<u8>, DataError> {
    let d = items.first().map_or(0, FaceEmbedding::dim);
    let mut out = Vec::with_capacity(20 + items.len() * (8 + 4 * d));
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(items.len() as u64).to_le_bytes());
    for e in items {
        if e.dim() != d {
            return Err(DataError::Dimension {
                expected: d,
                found: e.dim(),
            });
        }
        put_string(&mut out, &e.subject_id)?;
        out.extend_from_slice(&e.age.to_le_bytes());
        for v in &e.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8], origin: &Path) -> Result<Vec<FaceEmbedding>, DataError> {
    let mut r = ByteReader::new(bytes, "embedding container");
    if r.take(4).map_err(|_| DataError::BadMagic(origin.into()))? != EMBEDDING_MAGIC {
        return Err(DataError::BadMagic(origin.into()));
    }
    let version = r.u32()?;
    if version != EMBEDDING_VERSION {
        return Err(DataError::Version {
            what: "embedding container",
            found: version,
            expected: EMBEDDING_VERSION,
        });
    }
    let d = r.u32()? as usize;
    let count = r.u64()?;
    let mut out = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let subject = r.string()?;
        let age = r.f32()?;
        let mut v = Vec::with_capacity(d);
        for _ in 0..d {
            v.push(r.f32()?);
        }
        out.push(FaceEmbedding::new(subject, age, v)?);
    }
    if r.remaining() != 0 {
        return Err(DataError::Corrupt {
            what: "embedding container",
            detail: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, items: &[FaceEmbedding]) -> Result<(), DataError> {
    write_file(path, &encode_embeddings(items)?)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<FaceEmbedding>, DataError> {
    decode_embeddings(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f32]) -> Vec<f32> {
        let n = l2(v);
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn rejects_non_unit_vectors() {
        assert!(FaceEmbedding::new("a", 3.0, vec![1.0, 1.0]).is_err());
        let e = FaceEmbedding::normalized("a", 3.0, vec![3.0, 4.0]).unwrap();
        assert_eq!(e.vector(), &[0.6, 0.8]);
        assert!(FaceEmbedding::normalized("a", 3.0, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn header_layout_is_fixed() {
        let e = FaceEmbedding::new("ab", 2.5, vec![1.0, 0.0]).unwrap();
        let b = encode_embeddings(&[e]).unwrap();
        assert_eq!(&b[0..4], b"FAEB");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(b[20..22].try_into().unwrap()), 2);
        assert_eq!(&b[22..24], b"ab");
        assert_eq!(f32::from_le_bytes(b[24..28].try_into().unwrap()), 2.5);
        assert_eq!(b.len(), 28 + 8);
    }

    #[test]
    fn truncation_and_version_detected() {
        let e = FaceEmbedding::new("ab", 2.5, vec![1.0, 0.0]).unwrap();
        let b = encode_embeddings(&[e]).unwrap();
        let p = Path::new("x.faeb");
        assert!(matches!(
            decode_embeddings(&b[..b.len() - 3], p),
            Err(DataError::Corrupt { .. })
        ));
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_embeddings(&v2, p),
            Err(DataError::Version { found: 2, .. })
        ));
        let mut bad = b;
        bad[0] = b'X';
        assert!(matches!(
            decode_embeddings(&bad, p),
            Err(DataError::BadMagic(_))
        ));
    }

    proptest! {
        #[test]
        fn container_round_trip_is_bit_exact(
            recs in proptest::collection::vec(
                ("[a-z0-9]{1,12}", 0.0f32..30.0, proptest::collection::vec(-1.0f32..1.0, 5)),
                0..8,
            )
        ) {
            let items: Vec<FaceEmbedding> = recs
                .into_iter()
                .filter(|(_, _, v)| l2(v) > 1e-3)
                .map(|(s, a, v)| FaceEmbedding::new(s, a, unit(&v)).unwrap())
                .collect();
            let bytes = encode_embeddings(&items).unwrap();
            let back = decode_embeddings(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back.len(), items.len());
            for (a, b) in items.iter().zip(&back) {
                prop_assert_eq!(&a.subject_id, &b.subject_id);
                prop_assert_eq!(a.age.to_bits(), b.age.to_bits());
                prop_assert!(a.vector().iter().zip(b.vector()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
