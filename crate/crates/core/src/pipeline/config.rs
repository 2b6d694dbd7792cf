use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::fam::FamConfig;
use crate::generator::{GeneratorConfig, IdEncoderConfig};
use crate::numgrad::AdamConfig;
use crate::synthworld::{derive_seed, CorpusConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderCorpusConfig {
    pub n_subjects: usize,
    pub styles_per_subject: usize,
    /// Ages of one subject fall inside a window of this many years.
    pub age_window: f32,
}

impl Default for EncoderCorpusConfig {
    fn default() -> Self {
        Self {
            n_subjects: 1000,
            styles_per_subject: 4,
            age_window: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub n_subjects: usize,
    /// The first entry is the anchor age.
    pub ages: Vec<f32>,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            n_subjects: 400,
            ages: (1..=10).map(|i| 2.0 * i as f32).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub far_target: f64,
    /// Minimum years between a probe and its mate's gallery image.
    pub min_lapse: f32,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            far_target: 0.01,
            min_lapse: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub k_values: Vec<usize>,
    /// Generator iterations per style dimension.
    pub iterations: usize,
    /// Mated probes used for the image-level searches.
    pub probes: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            k_values: vec![0, 8, 32, 128],
            iterations: 1000,
            probes: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: String,
    pub checkpoints: String,
    pub reports: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "run/corpus".into(),
            checkpoints: "run/checkpoints".into(),
            reports: "run/reports".into(),
        }
    }
}

/// Everything that determines a run. Stage seeds are derived from `seed`
/// by [`RunConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub encoder_corpus: EncoderCorpusConfig,
    pub encoder: IdEncoderConfig,
    pub fam: FamConfig,
    pub generator: GeneratorConfig,
    pub protocol: ProtocolConfig,
    pub drift: DriftConfig,
    pub ablation: AblationConfig,
}

pub const PRESETS: [&str; 2] = ["desk", "paper"];

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Single-core minutes-scale defaults.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            seed: 7,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            encoder_corpus: EncoderCorpusConfig::default(),
            encoder: IdEncoderConfig::default(),
            fam: FamConfig::default(),
            generator: GeneratorConfig {
                adam: AdamConfig {
                    learning_rate: 1e-3,
                    ..AdamConfig::default()
                },
                ..GeneratorConfig::default()
            },
            protocol: ProtocolConfig::default(),
            drift: DriftConfig::default(),
            ablation: AblationConfig::default(),
        }
        .resolved()
    }

    /// Published optimizer settings and iteration counts.
    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.preset = "paper".into();
        cfg.corpus.n_subjects = 2000;
        cfg.fam = FamConfig::paper();
        cfg.generator.adam = AdamConfig::default();
        cfg.generator.iterations = 20_000;
        cfg.ablation.iterations = 20_000;
        cfg.resolved()
    }

    pub fn preset(name: &str) -> Result<Self, PipelineError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(PipelineError::Config(format!(
                "unknown preset {other:?} (expected one of {PRESETS:?})"
            ))),
        }
    }

    /// Copies the master seed into every stage.
    pub fn resolved(mut self) -> Self {
        let s = self.seed;
        self.corpus.seed = s;
        self.encoder.seed = derive_seed(s, 11, 0);
        self.fam.seed = derive_seed(s, 12, 0);
        self.generator.seed = derive_seed(s, 13, 0);
        self.corpus.min_probe_gap = self.protocol.min_lapse;
        self
    }

    pub fn encoder_corpus_seed(&self) -> u64 {
        derive_seed(self.seed, 10, 0)
    }

    pub fn drift_seed(&self) -> u64 {
        derive_seed(self.seed, 14, 0)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !PRESETS.contains(&self.preset.as_str()) {
            return bad("preset must be desk or paper");
        }
        if !(self.protocol.far_target > 0.0 && self.protocol.far_target <= 1.0) {
            return bad("far_target must lie in (0, 1]");
        }
        if self.encoder.d == 0 {
            return bad("d must be positive");
        }
        for w in [
            self.generator.weights.id,
            self.generator.weights.pix,
            self.generator.weights.tv,
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return bad("loss weights must be non-negative");
            }
        }
        if let Some(k) = self
            .ablation
            .k_values
            .iter()
            .find(|k| ![0, 8, 32, 128].contains(*k))
        {
            return Err(PipelineError::Config(format!(
                "ablation k={k} not in {{0, 8, 32, 128}}"
            )));
        }
        if self.drift.ages.len() < 2 {
            return bad("drift needs an anchor and at least one target age");
        }
        Ok(())
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("config serializes");
        out.push(b'\n');
        out
    }

    /// Overlays a (possibly partial) JSON document on `self`.
    pub fn overlay_json(&self, bytes: &[u8]) -> Result<Self, PipelineError> {
        let err = |e: serde_json::Error| PipelineError::Config(format!("config file: {e}"));
        let mut base = serde_json::to_value(self).map_err(err)?;
        let patch: serde_json::Value = serde_json::from_slice(bytes).map_err(err)?;
        merge(&mut base, patch);
        let cfg: Self = serde_json::from_value(base).map_err(err)?;
        Ok(cfg.resolved())
    }

    /// Hex SHA-256 of the JSON snapshot with `paths` cleared, so relocating
    /// outputs leaves the hash (and every artifact carrying it) unchanged.
    pub fn hash(&self) -> String {
        let mut located = self.clone();
        located.paths = Paths {
            corpus: String::new(),
            checkpoints: String::new(),
            reports: String::new(),
        };
        let digest = Sha256::digest(located.to_json());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
