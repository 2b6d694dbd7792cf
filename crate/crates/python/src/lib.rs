//! Python module `feature_aging_py`: the command line, embedding containers,
//! feature aging and the search protocols.

use std::path::PathBuf;

use feature_aging::dataio::{read_embeddings, write_embeddings, FaceEmbedding};
use feature_aging::eval::{calibrate_threshold, closed_set_search, Gallery, GalleryEntry, Probe, ProbeSet};
use feature_aging::fam::{AgePair, FamParams};
use feature_aging::pipeline::RunConfig;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

type Entry = (String, f32, Vec<f32>);

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_embeddings(entries: Vec<Entry>) -> PyResult<Vec<FaceEmbedding>> {
    entries
        .into_iter()
        .map(|(s, a, v)| FaceEmbedding::normalized(s, a, v).map_err(err))
        .collect()
}

fn from_embeddings(items: Vec<FaceEmbedding>) -> Vec<Entry> {
    items
        .into_iter()
        .map(|e| {
            let v = e.vector().to_vec();
            (e.subject_id, e.age, v)
        })
        .collect()
}

/// Runs the command line with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    feature_aging::cli::dispatch(std::iter::once("feature-aging".to_string()).chain(args))
}

/// Resolved configuration of a preset as JSON.
#[pyfunction]
fn preset_config(name: &str) -> PyResult<String> {
    let cfg = RunConfig::preset(name).map_err(err)?;
    String::from_utf8(cfg.to_json()).map_err(err)
}

/// `(subject_id, age, vector)` tuples of an embedding container.
#[pyfunction]
fn load_embeddings(path: PathBuf) -> PyResult<Vec<Entry>> {
    Ok(from_embeddings(read_embeddings(&path).map_err(err)?))
}

/// Writes `(subject_id, age, vector)` tuples; vectors are normalized.
#[pyfunction]
fn save_embeddings(path: PathBuf, entries: Vec<Entry>) -> PyResult<()> {
    write_embeddings(&path, &to_embeddings(entries)?).map_err(err)
}

/// Ages every vector from its age in `from_ages` to `to_age` with a FAM checkpoint.
#[pyfunction]
fn age_vectors(fam_checkpoint: PathBuf, vectors: Vec<Vec<f32>>, from_ages: Vec<f32>, to_age: f32) -> PyResult<Vec<Vec<f32>>> {
    if vectors.len() != from_ages.len() {
        return Err(err(format!("{} vectors but {} ages", vectors.len(), from_ages.len())));
    }
    let ckpt = feature_aging::dataio::load_checkpoint(&fam_checkpoint).map_err(err)?;
    let fam = FamParams::from_checkpoint(ckpt).map_err(err)?;
    let ages = from_ages
        .iter()
        .map(|&a| AgePair::new(a, to_age))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let refs: Vec<&[f32]> = vectors.iter().map(Vec::as_slice).collect();
    fam.age_vectors(&refs, &ages).map_err(err)
}

/// Closed-set rank-1 of probes whose subject is enrolled in the gallery.
#[pyfunction]
fn closed_set_rank1(gallery: Vec<Entry>, probes: Vec<Entry>) -> PyResult<f64> {
    let gallery = Gallery::new(
        to_embeddings(gallery)?
            .into_iter()
            .map(|embedding| GalleryEntry {
                embedding,
                distractor: false,
            })
            .collect(),
    );
    let probes = to_embeddings(probes)?
        .into_iter()
        .map(|embedding| Probe { embedding, mated: true })
        .collect();
    let probes = ProbeSet::new(probes, &gallery).map_err(err)?;
    Ok(closed_set_search(&gallery, &probes, None).map_err(err)?.closed_set_rank1)
}

/// Smallest threshold keeping the false accept rate of `impostor` within `far`.
#[pyfunction]
fn threshold_at_far(impostor: Vec<f32>, far: f64) -> PyResult<f32> {
    calibrate_threshold(&impostor, far).map_err(err)
}

#[pymodule]
fn feature_aging_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(load_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(save_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(age_vectors, m)?)?;
    m.add_function(wrap_pyfunction!(closed_set_rank1, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_at_far, m)?)?;
    Ok(())
}
