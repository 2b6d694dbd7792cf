use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{read_file, write_file, DataError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Gallery,
    Probe,
    Distractor,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Gallery => "gallery",
            Split::Probe => "probe",
            Split::Distractor => "distractor",
        };
        f.write_str(s)
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "gallery" => Ok(Split::Gallery),
            "probe" => Ok(Split::Probe),
            "distractor" => Ok(Split::Distractor),
            other => Err(DataError::Manifest(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub subject_id: String,
    pub age: f32,
    pub style_id: String,
    pub split: Split,
    pub path: String,
}

/// Ordered dataset records. Subjects tagged `train` never carry any
/// evaluation tag (`test`, `gallery`, `probe`, `distractor`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self, DataError> {
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        let mut train = BTreeSet::new();
        let mut eval = BTreeSet::new();
        for r in &self.records {
            if !(r.age.is_finite() && r.age >= 0.0) {
                return Err(DataError::Manifest(format!(
                    "record {}/{}: age {} must be ≥ 0",
                    r.subject_id, r.path, r.age
                )));
            }
            if !seen.insert((r.subject_id.as_str(), r.age.to_bits(), r.path.as_str())) {
                return Err(DataError::Manifest(format!(
                    "duplicate record (subject {}, age {}, {})",
                    r.subject_id, r.age, r.path
                )));
            }
            if r.split == Split::Train {
                train.insert(r.subject_id.as_str());
            } else {
                eval.insert(r.subject_id.as_str());
            }
        }
        if let Some(s) = train.intersection(&eval).next() {
            return Err(DataError::Manifest(format!(
                "subject {s} appears in both train and evaluation splits"
            )));
        }
        Ok(())
    }

    /// Concatenates two manifests, re-checking every invariant.
    pub fn merge(&self, other: &Manifest) -> Result<Manifest, DataError> {
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        Manifest::new(records)
    }

    pub fn filter(&self, pred: impl Fn(&ManifestRecord) -> bool) -> Manifest {
        Manifest {
            records: self.records.iter().filter(|r| pred(r)).cloned().collect(),
        }
    }

    pub fn with_split(&self, split: Split) -> Manifest {
        self.filter(|r| r.split == split)
    }

    /// Record indices grouped by subject, in first-appearance order of subjects.
    pub fn by_subject(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut slot: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            let k = *slot.entry(r.subject_id.as_str()).or_insert_with(|| {
                order.push((r.subject_id.clone(), Vec::new()));
                order.len() - 1
            });
            order[k].1.push(i);
        }
        order
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, DataError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["subject_id", "age", "style_id", "split", "path"])
            .map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.subject_id.as_str(),
                &r.age.to_string(),
                r.style_id.as_str(),
                &r.split.to_string(),
                r.path.as_str(),
            ])
            .map_err(csv_err)?;
        }
        w.into_inner()
            .map_err(|e| DataError::Manifest(e.to_string()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(bytes);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let expected = ["subject_id", "age", "style_id", "split", "path"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(DataError::Manifest(format!(
                "header must be {}, found {}",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(csv_err)?;
            let age = row[1]
                .parse::<f32>()
                .map_err(|_| DataError::Manifest(format!("bad age {:?}", &row[1])))?;
            records.push(ManifestRecord {
                subject_id: row[0].to_string(),
                age,
                style_id: row[2].to_string(),
                split: row[3].parse()?,
                path: row[4].to_string(),
            });
        }
        Manifest::new(records)
    }
}

fn csv_err(e: csv::Error) -> DataError {
    DataError::Manifest(e.to_string())
}

/// Parses a UTF-8, comma-separated manifest with a required header row.
/// An empty file or a header-only file yields an empty manifest.
pub fn load_manifest(path: &Path) -> Result<Manifest, DataError> {
    let bytes = read_file(path)?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(Manifest::default());
    }
    Manifest::from_csv(&bytes)
}

pub fn save_manifest(path: &Path, m: &Manifest) -> Result<(), DataError> {
    write_file(path, &m.to_csv()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(s: &str, age: f32, split: Split, path: &str) -> ManifestRecord {
        ManifestRecord {
            subject_id: s.into(),
            age,
            style_id: "st0".into(),
            split,
            path: path.into(),
        }
    }

    #[test]
    fn empty_manifest_is_fine() {
        let m = Manifest::from_csv(b"subject_id,age,style_id,split,path\n").unwrap();
        assert!(m.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, b"").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn train_test_overlap_rejected() {
        let err = Manifest::new(vec![
            rec("s1", 3.0, Split::Train, "a.ppm"),
            rec("s1", 9.0, Split::Test, "b.ppm"),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("s1"));
    }

    #[test]
    fn duplicate_record_rejected() {
        assert!(Manifest::new(vec![
            rec("s1", 3.0, Split::Train, "a.ppm"),
            rec("s1", 3.0, Split::Train, "a.ppm"),
        ])
        .is_err());
    }

    #[test]
    fn merge_revalidates_disjointness() {
        let a = Manifest::new(vec![rec("s1", 3.0, Split::Train, "a.ppm")]).unwrap();
        let b = Manifest::new(vec![rec("s1", 5.0, Split::Probe, "b.ppm")]).unwrap();
        let c = Manifest::new(vec![rec("s2", 5.0, Split::Gallery, "c.ppm")]).unwrap();
        assert!(a.merge(&b).is_err());
        assert_eq!(a.merge(&c).unwrap().len(), 2);
    }

    #[test]
    fn csv_round_trip_and_header_required() {
        let m = Manifest::new(vec![
            rec("s1", 3.25, Split::Train, "a.ppm"),
            rec("s2", 19.5, Split::Gallery, "dir/b.ppm"),
        ])
        .unwrap();
        let bytes = m.to_csv().unwrap();
        assert!(bytes.starts_with(b"subject_id,age,style_id,split,path\n"));
        assert_eq!(Manifest::from_csv(&bytes).unwrap(), m);
        assert!(Manifest::from_csv(b"s1,3,st0,train,a.ppm\n").is_err());
    }
}
