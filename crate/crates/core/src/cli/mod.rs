//! Command-line front end: one subcommand per pipeline stage.
//!
//! Configuration resolves in order preset → `--config` JSON file → flags.
//! Every command writes `<command>.config.json` (the resolved configuration,
//! its hash and the files read and written) next to its outputs. Checkpoints
//! carry the hash in their header, images in a header comment, and every
//! other artifact in a `<file>.cfghash` sidecar.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use crate::pipeline::{PipelineError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Variable controlling log verbosity (`error` … `trace`).
pub const LOG_ENV: &str = "FEATURE_AGING_LOG";

#[derive(Debug, Parser)]
#[command(name = "feature-aging", version, about = "Deep-feature age progression on a synthetic longitudinal face world")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Named defaults: desk (single-core minutes) or paper (published settings).
    #[arg(long, global = true, default_value = "desk")]
    pub preset: String,
    /// JSON file overlaid on the preset; flags win over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; every stage seed derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

/// Optimizer and schedule overrides for a training stage.
#[derive(Debug, Args, Default)]
pub struct Optim {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the longitudinal corpus plus encoder and drift corpora.
    GenSynthetic {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        ages_per_subject: Option<usize>,
        #[arg(long)]
        encoder_subjects: Option<usize>,
        #[arg(long)]
        drift_subjects: Option<usize>,
    },
    /// Train the identity encoder and embed the corpus.
    TrainEncoder {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory receiving train/gallery/probes/test/drift containers.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        d: Option<usize>,
        #[command(flatten)]
        optim: Optim,
    },
    /// Train the feature aging module on genuine pairs of the train split.
    TrainFam {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        optim: Optim,
    },
    /// Train the style encoder and decoder against the frozen identity encoder.
    TrainGenerator {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        lambda_id: Option<f64>,
        #[arg(long)]
        lambda_pix: Option<f64>,
        #[arg(long)]
        lambda_tv: Option<f64>,
        #[command(flatten)]
        optim: Optim,
    },
    /// Age every embedding of a container to a target age.
    Age {
        #[arg(long = "in")]
        input: PathBuf,
        /// Enrollment age for all entries (default: each entry's own age).
        #[arg(long)]
        from: Option<f32>,
        #[arg(long)]
        to: f32,
        #[arg(long)]
        fam: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an image at a target age.
    Synthesize {
        #[arg(long)]
        image: PathBuf,
        /// Age of the input image.
        #[arg(long)]
        age: f32,
        #[arg(long)]
        to: f32,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        fam: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-set, open-set and lapse-bucket search, optionally with an aged gallery.
    Evaluate {
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        probes: PathBuf,
        /// Mated images under the minimum lapse (lapse curve only).
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        fam: Option<PathBuf>,
        #[arg(long)]
        far: Option<f64>,
        /// Drift-corpus embeddings; writes drift.csv.
        #[arg(long)]
        drift: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruction versus aging accuracy across style dimensions.
    AblateStyleDim {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        fam: Option<PathBuf>,
        /// Already trained generator reused for its own k.
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSynthetic { .. } => "gen-synthetic",
            Command::TrainEncoder { .. } => "train-encoder",
            Command::TrainFam { .. } => "train-fam",
            Command::TrainGenerator { .. } => "train-generator",
            Command::Age { .. } => "age",
            Command::Synthesize { .. } => "synthesize",
            Command::Evaluate { .. } => "evaluate",
            Command::AblateStyleDim { .. } => "ablate-style-dim",
        }
    }
}

/// Preset, then config file, then seed; subcommand flags are applied by the
/// command itself.
pub fn base_config(global: &Global) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::preset(&global.preset)?;
    if let Some(path) = &global.config {
        let bytes = crate::dataio::read_file(path)?;
        cfg = cfg.overlay_json(&bytes)?;
        cfg.preset = global.preset.clone();
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    Ok(cfg.resolved())
}

/// Parses `argv` (program name first) and runs the command, returning the
/// process exit code: 0 on success, 1 on a failed run, 2 on bad usage.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
