//! Longitudinal identification protocols and diagnostics: closed- and
//! open-set rank-1 search (optionally aging the gallery to each probe's age),
//! FAR threshold calibration, lapse curves, mean-feature drift and
//! verification accuracy.

mod drift;
mod report;
mod search;
mod threshold;

use thiserror::Error;

pub use drift::{mean_feature_drift, DriftPoint};
pub use report::{emit_report, read_report_json, report_csv, report_json, REPORT_COLUMNS};
pub use search::{
    closed_set_from_scores, closed_set_search, cosine_similarity, lapse_curve,
    open_set_from_scores, open_set_search, score_matrix, top_match, Gallery, GalleryEntry,
    IdentificationReport, LapseBucket, LapseResult, Probe, ProbeSet,
};
pub use threshold::{
    calibrate_threshold, empirical_far, verification_accuracy, verification_accuracy_scores,
    LabeledPair, ThresholdPolicy,
};

use crate::dataio::DataError;
use crate::fam::FamError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("empty gallery")]
    EmptyGallery,
    #[error("empty probe set")]
    EmptyProbes,
    #[error("probe of subject {0} is marked mated but the subject is not enrolled")]
    UnenrolledMate(String),
    #[error("closed-set search requires mated probes only; probe of {0} is unmated")]
    UnmatedProbe(String),
    #[error("no unmated probes: cannot calibrate an open-set threshold")]
    NoImpostors,
    #[error("calibrating FAR {far} needs at least {required} impostor scores, got {found}")]
    InsufficientImpostors {
        far: f64,
        required: usize,
        found: usize,
    },
    #[error("FAR target {0} outside (0, 1]")]
    FarTarget(f64),
    #[error("lapse buckets overlap or are malformed: {0}")]
    Buckets(String),
    #[error("verification needs both same and different pairs")]
    SingleClass,
    #[error("empty pair list")]
    EmptyPairs,
    #[error(transparent)]
    Fam(#[from] FamError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("report i/o: {0}")]
    Report(String),
}
