use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{error, info, warn};
use serde::Serialize;

use super::{base_config, Cli, Command, Optim};
use crate::dataio::{
    load_checkpoint, load_manifest, read_embeddings, read_images, read_ppm, save_checkpoint, write_embeddings,
    write_file, write_ppm_tagged, FaceEmbedding, ImageSample, Split,
};
use crate::eval::emit_report;
use crate::fam::{train_fam, AgePair, FamError, FamParams};
use crate::generator::{synthesize_aged, train_generator, train_id_encoder, Generator, IdEncoder, LossBreakdown};
use crate::numgrad::AdamConfig;
use crate::pipeline::{
    ablate_style_dim, ablation_csv, drift_csv, drift_table, embedding_manifest, evaluate, gallery_indices,
    generate_corpora, split_embeddings, PipelineError, RunConfig,
};
use crate::synthworld::Corpus;

/// Resolved configuration plus the bookkeeping of one command run.
struct Run {
    command: &'static str,
    cfg: RunConfig,
    hash: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    command: &'a str,
    config_hash: &'a str,
    inputs: &'a [String],
    outputs: &'a [String],
    config: &'a RunConfig,
}

impl Run {
    fn new(command: &'static str, cfg: RunConfig) -> Result<Self, PipelineError> {
        let cfg = cfg.resolved();
        cfg.validate()?;
        let hash = cfg.hash();
        info!("{command}: preset {} seed {} config {}", cfg.preset, cfg.seed, &hash[..12]);
        Ok(Self {
            command,
            cfg,
            hash,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, path: &Path) -> PathBuf {
        self.inputs.push(path.display().to_string());
        path.to_path_buf()
    }

    /// Writes `bytes` and its `.cfghash` sidecar.
    fn artifact(&mut self, path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
        write_file(path, bytes)?;
        self.sidecar(path)
    }

    fn sidecar(&mut self, path: &Path) -> Result<(), PipelineError> {
        let mut side = path.as_os_str().to_owned();
        side.push(".cfghash");
        write_file(Path::new(&side), format!("{}\n", self.hash).as_bytes())?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    fn embeddings(&mut self, path: &Path, items: &[FaceEmbedding]) -> Result<(), PipelineError> {
        write_embeddings(path, items)?;
        self.sidecar(path)
    }

    fn checkpoint(&mut self, path: &Path, ckpt: &crate::dataio::Checkpoint) -> Result<(), PipelineError> {
        save_checkpoint(path, ckpt)?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    /// Writes `<dir>/<command>.config.json`.
    fn finish(self, dir: &Path) -> Result<(), PipelineError> {
        let snap = Snapshot {
            command: self.command,
            config_hash: &self.hash,
            inputs: &self.inputs,
            outputs: &self.outputs,
            config: &self.cfg,
        };
        let mut bytes = serde_json::to_vec_pretty(&snap).map_err(|e| PipelineError::Config(e.to_string()))?;
        bytes.push(b'\n');
        write_file(&dir.join(format!("{}.config.json", self.command)), &bytes)?;
        Ok(())
    }
}

fn parent(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn apply_optim(adam: &mut AdamConfig, batch: &mut usize, iterations: &mut usize, o: &Optim) {
    if let Some(v) = o.lr {
        adam.learning_rate = v;
    }
    if let Some(v) = o.beta1 {
        adam.beta1 = v;
    }
    if let Some(v) = o.beta2 {
        adam.beta2 = v;
    }
    if let Some(v) = o.batch {
        *batch = v;
    }
    if let Some(v) = o.iterations {
        *iterations = v;
    }
}

fn load_images(run: &mut Run, dir: &Path) -> Result<(crate::dataio::Manifest, Vec<ImageSample>), PipelineError> {
    let manifest = load_manifest(&run.input(&dir.join("manifest.csv")))?;
    let images = read_images(dir, &manifest)?;
    Ok((manifest, images))
}

fn load_encoder(run: &mut Run, path: &Path) -> Result<IdEncoder, PipelineError> {
    Ok(IdEncoder::from_checkpoint(load_checkpoint(&run.input(path))?)?)
}

fn load_fam(run: &mut Run, path: &Path) -> Result<FamParams, PipelineError> {
    Ok(FamParams::from_checkpoint(load_checkpoint(&run.input(path))?)?)
}

fn history_csv(header: &str, rows: impl Iterator<Item = String>) -> Vec<u8> {
    let mut out = format!("{header}\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out.into_bytes()
}

fn write_corpus(run: &mut Run, corpus: &Corpus, dir: &Path) -> Result<(), PipelineError> {
    for w in &corpus.warnings {
        warn!("{w}");
    }
    corpus.write_tagged(dir, Some(&format!("config {}", run.hash)))?;
    run.sidecar(&dir.join("manifest.csv"))
}

pub(super) fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = base_config(&cli.global)?;
    let name = cli.command.name();
    let started = Instant::now();
    let result = match cli.command {
        Command::GenSynthetic {
            out,
            subjects,
            ages_per_subject,
            encoder_subjects,
            drift_subjects,
        } => {
            if let Some(v) = subjects {
                cfg.corpus.n_subjects = v;
            }
            if let Some(v) = ages_per_subject {
                cfg.corpus.ages_per_subject = v;
            }
            if let Some(v) = encoder_subjects {
                cfg.encoder_corpus.n_subjects = v;
            }
            if let Some(v) = drift_subjects {
                cfg.drift.n_subjects = v;
            }
            let dir = out.unwrap_or_else(|| cfg.paths.corpus.clone().into());
            let mut run = Run::new(name, cfg)?;
            let corpora = generate_corpora(&run.cfg)?;
            write_corpus(&mut run, &corpora.main, &dir)?;
            write_corpus(&mut run, &corpora.encoder, &dir.join("encoder"))?;
            write_corpus(&mut run, &corpora.drift, &dir.join("drift"))?;
            info!(
                "wrote {} + {} + {} images to {}",
                corpora.main.images.len(),
                corpora.encoder.images.len(),
                corpora.drift.images.len(),
                dir.display()
            );
            run.finish(&dir)
        }
        Command::TrainEncoder {
            corpus,
            out,
            embeddings,
            d,
            optim,
        } => {
            let e = &mut cfg.encoder;
            if let Some(v) = d {
                e.d = v;
            }
            apply_optim(&mut e.adam, &mut e.batch, &mut e.iterations, &optim);
            let corpus = corpus.unwrap_or_else(|| cfg.paths.corpus.clone().into());
            let out = out.unwrap_or_else(|| Path::new(&cfg.paths.checkpoints).join("encoder.ckpt"));
            let emb_dir = embeddings.unwrap_or_else(|| Path::new(&cfg.paths.checkpoints).join("embeddings"));
            let mut run = Run::new(name, cfg)?;
            let (_, enc_images) = load_images(&mut run, &corpus.join("encoder"))?;
            let (encoder, history) = train_id_encoder(&enc_images, &run.cfg.encoder)?;
            run.checkpoint(&out, &encoder.to_checkpoint(&run.hash))?;
            let loss = history_csv("step,loss", history.iter().enumerate().map(|(i, l)| format!("{i},{l}")));
            run.artifact(&parent(&out).join("encoder_loss.csv"), &loss)?;

            let (manifest, images) = load_images(&mut run, &corpus)?;
            let embs = encoder.encode(&images.iter().collect::<Vec<_>>())?;
            let splits = split_embeddings(&manifest, &embs)?;
            for (file, items) in [
                ("train.faeb", &splits.train),
                ("gallery.faeb", &splits.gallery),
                ("probes.faeb", &splits.probes),
                ("test.faeb", &splits.test),
            ] {
                if !items.is_empty() {
                    run.embeddings(&emb_dir.join(file), items)?;
                }
            }
            let (_, drift_images) = load_images(&mut run, &corpus.join("drift"))?;
            let drift = encoder.encode(&drift_images.iter().collect::<Vec<_>>())?;
            run.embeddings(&emb_dir.join("drift.faeb"), &drift)?;
            run.finish(&parent(&out))
        }
        Command::TrainFam { train, out, optim } => {
            let f = &mut cfg.fam;
            apply_optim(&mut f.adam, &mut f.batch, &mut f.iterations, &optim);
            let train = train.unwrap_or_else(|| Path::new(&cfg.paths.checkpoints).join("embeddings/train.faeb"));
            let out = out.unwrap_or_else(|| Path::new(&cfg.paths.checkpoints).join("fam.ckpt"));
            let mut run = Run::new(name, cfg)?;
            let embs = read_embeddings(&run.input(&train))?;
            let manifest = embedding_manifest(&embs)?;
            match train_fam(&run.cfg.fam, &manifest, &embs) {
                Ok((fam, history)) => {
                    run.checkpoint(&out, &fam.to_checkpoint(&run.hash))?;
                    let loss = history_csv("step,loss", history.iter().enumerate().map(|(i, l)| format!("{i},{l}")));
                    run.artifact(&parent(&out).join("fam_loss.csv"), &loss)?;
                    run.finish(&parent(&out))
                }
                Err(FamError::Diverged { step, last_good }) => {
                    run.checkpoint(&out, &last_good.to_checkpoint(&run.hash))?;
                    run.finish(&parent(&out))?;
                    error!("saved the last finite parameters to {}", out.display());
                    Err(FamError::Diverged { step, last_good }.into())
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::TrainGenerator {
            corpus,
            encoder,
            out,
            k,
            lambda_id,
            lambda_pix,
            lambda_tv,
            optim,
        } => {
            let g = &mut cfg.generator;
            if let Some(v) = k {
                g.k = v;
            }
            if let Some(v) = lambda_id {
                g.weights.id = v;
            }
            if let Some(v) = lambda_pix {
                g.weights.pix = v;
            }
            if let Some(v) = lambda_tv {
                g.weights.tv = v;
            }
            apply_optim(&mut g.adam, &mut g.batch, &mut g.iterations, &optim);
            let ckpts = PathBuf::from(&cfg.paths.checkpoints);
            let corpus = corpus.unwrap_or_else(|| cfg.paths.corpus.clone().into());
            let encoder = encoder.unwrap_or_else(|| ckpts.join("encoder.ckpt"));
            let out = out.unwrap_or_else(|| ckpts.join("generator.ckpt"));
            let mut run = Run::new(name, cfg)?;
            let enc = load_encoder(&mut run, &encoder)?;
            let (manifest, images) = load_images(&mut run, &corpus)?;
            let train: Vec<ImageSample> = manifest
                .records()
                .iter()
                .zip(images)
                .filter(|(r, _)| r.split == Split::Train)
                .map(|(_, i)| i)
                .collect();
            let (generator, history) = train_generator(&train, &enc, &run.cfg.generator)?;
            run.checkpoint(&out, &generator.to_checkpoint(&run.hash))?;
            let rows = history.iter().enumerate().map(|(i, b): (usize, &LossBreakdown)| {
                format!("{i},{},{},{},{}", b.total, b.id, b.pix, b.tv)
            });
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("generator");
            run.artifact(&parent(&out).join(format!("{stem}_loss.csv")), &history_csv("step,total,id,pix,tv", rows))?;
            run.finish(&parent(&out))
        }
        Command::Age {
            input,
            from,
            to,
            fam,
            out,
        } => {
            let mut run = Run::new(name, cfg)?;
            let fam = load_fam(&mut run, &fam)?;
            let embs = read_embeddings(&run.input(&input))?;
            let ages = embs
                .iter()
                .map(|e| AgePair::new(from.unwrap_or(e.age), to))
                .collect::<Result<Vec<_>, _>>()?;
            let vectors: Vec<&[f32]> = embs.iter().map(FaceEmbedding::vector).collect();
            let aged = fam.age_vectors(&vectors, &ages)?;
            let aged = embs
                .iter()
                .zip(aged)
                .map(|(e, v)| FaceEmbedding::new(e.subject_id.clone(), to, v))
                .collect::<Result<Vec<_>, _>>()?;
            if aged.len() != embs.len() {
                return Err(PipelineError::Invariant("aged container lost entries".into()));
            }
            run.embeddings(&out, &aged)?;
            run.finish(&parent(&out))
        }
        Command::Synthesize {
            image,
            age,
            to,
            encoder,
            fam,
            generator,
            out,
        } => {
            let mut run = Run::new(name, cfg)?;
            let enc = load_encoder(&mut run, &encoder)?;
            let fam = load_fam(&mut run, &fam)?;
            let generator = Generator::from_checkpoint(load_checkpoint(&run.input(&generator))?)?;
            let subject = image.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string();
            let img = read_ppm(&run.input(&image), &subject, age, "input")?;
            let aged = synthesize_aged(&fam, &generator, &enc, &img, to)?;
            write_ppm_tagged(&out, &aged, &format!("config {}", run.hash))?;
            run.outputs.push(out.display().to_string());
            run.finish(&parent(&out))
        }
        Command::Evaluate {
            gallery,
            probes,
            test,
            fam,
            far,
            drift,
            out,
        } => {
            if let Some(v) = far {
                cfg.protocol.far_target = v;
            }
            let out = out.unwrap_or_else(|| cfg.paths.reports.clone().into());
            let mut run = Run::new(name, cfg)?;
            let gallery = read_embeddings(&run.input(&gallery))?;
            let probes = read_embeddings(&run.input(&probes))?;
            let test = match test {
                Some(p) => read_embeddings(&run.input(&p))?,
                None => Vec::new(),
            };
            let fam = fam.map(|p| load_fam(&mut run, &p)).transpose()?;
            let reports = evaluate(&gallery, &probes, &test, fam.as_ref(), &run.cfg.protocol)?;
            for r in &reports {
                info!(
                    "{}: closed-set rank-1 {:.4}, open-set {:?} (P={}, G={})",
                    r.condition, r.closed_set_rank1, r.open_set_rank1_at_far, r.probes, r.gallery
                );
            }
            let (csv, json) = emit_report(&reports, &out, "report")?;
            run.sidecar(&csv)?;
            run.sidecar(&json)?;
            if let Some(p) = drift {
                let embs = read_embeddings(&run.input(&p))?;
                let table = drift_table(&embs, fam.as_ref())?;
                run.artifact(&out.join("drift.csv"), &drift_csv(&table))?;
            }
            run.finish(&out)
        }
        Command::AblateStyleDim {
            corpus,
            encoder,
            fam,
            generator,
            k,
            iterations,
            probes,
            out,
        } => {
            if let Some(v) = k {
                cfg.ablation.k_values = v;
            }
            if let Some(v) = iterations {
                cfg.ablation.iterations = v;
            }
            if let Some(v) = probes {
                cfg.ablation.probes = v;
            }
            let ckpts = PathBuf::from(&cfg.paths.checkpoints);
            let corpus = corpus.unwrap_or_else(|| cfg.paths.corpus.clone().into());
            let encoder = encoder.unwrap_or_else(|| ckpts.join("encoder.ckpt"));
            let fam = fam.unwrap_or_else(|| ckpts.join("fam.ckpt"));
            let out = out.unwrap_or_else(|| Path::new(&cfg.paths.reports).join("ablation.csv"));
            let mut run = Run::new(name, cfg)?;
            let enc = load_encoder(&mut run, &encoder)?;
            let fam = load_fam(&mut run, &fam)?;
            let reuse = generator
                .map(|p| -> Result<Generator, PipelineError> {
                    Ok(Generator::from_checkpoint(load_checkpoint(&run.input(&p))?)?)
                })
                .transpose()?;
            let (manifest, images) = load_images(&mut run, &corpus)?;
            let recs = manifest.records();
            let train: Vec<ImageSample> = recs
                .iter()
                .zip(&images)
                .filter(|(r, _)| r.split == Split::Train)
                .map(|(_, i)| i.clone())
                .collect();
            let gallery: Vec<&ImageSample> = gallery_indices(&manifest).into_iter().map(|i| &images[i]).collect();
            let enrolled: std::collections::HashSet<&str> = gallery.iter().map(|g| g.subject_id.as_str()).collect();
            let probe_images: Vec<&ImageSample> = recs
                .iter()
                .zip(&images)
                .filter(|(r, _)| r.split == Split::Probe && enrolled.contains(r.subject_id.as_str()))
                .map(|(_, i)| i)
                .collect();
            let probe_embs = enc.encode(&probe_images)?;
            let rows = ablate_style_dim(&run.cfg, &train, &enc, &fam, &gallery, &probe_embs, &reuse.iter().collect::<Vec<_>>())?;
            run.artifact(&out, &ablation_csv(&rows))?;
            run.finish(&parent(&out))
        }
    };
    if result.is_ok() {
        info!("{name} finished in {:.1}s", started.elapsed().as_secs_f64());
    }
    result
}
