use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataio::ImageSample;
use crate::fam::FamParams;
use crate::synthworld::{render, subject_spec, StyleSpec};

fn faces(n: usize, seed: u64) -> Vec<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let s = subject_spec(seed, i);
            render(
                &s,
                4.0 + i as f32,
                &StyleSpec::sample(&mut rng),
                &format!("g{i}"),
            )
            .unwrap()
        })
        .collect()
}

fn nets(k: usize) -> (Generator, IdEncoder) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let enc = IdEncoder::init(&mut rng, 16);
    (
        Generator::init(&mut rng, 16, k, LossWeights::default()),
        enc,
    )
}

#[test]
fn weighted_terms_sum_to_total() {
    let imgs = faces(4, 1);
    let refs: Vec<&ImageSample> = imgs.iter().collect();
    for k in [0, 8] {
        let (gen, enc) = nets(k);
        let b = generator_loss(&gen, &enc, &refs).unwrap();
        let w = gen.weights();
        let sum = w.id * b.id as f64 + w.pix * b.pix as f64 + w.tv * b.tv as f64;
        assert!((sum - b.total as f64).abs() <= 1e-6, "{sum} vs {}", b.total);
        assert!(b.id > 0.0 && b.pix > 0.0 && b.tv > 0.0);
    }
    let (gen, enc) = nets(8);
    assert!(matches!(
        generator_loss(&gen, &enc, &[]),
        Err(GeneratorError::EmptyBatch)
    ));
}

#[test]
fn style_vectors() {
    let imgs = faces(2, 2);
    let (gen, _) = nets(8);
    let a = gen.encode_style(&imgs[0]).unwrap();
    assert_eq!(a.len(), 8);
    assert_eq!(a, gen.encode_style(&imgs[0].clone()).unwrap());
    let (flat, _) = nets(0);
    assert!(flat.encode_style(&imgs[0]).unwrap().is_empty());
    let small = ImageSample::new("x", 3.0, "s", (16, 16, 3), vec![0.5; 16 * 16 * 3]).unwrap();
    assert!(matches!(
        gen.encode_style(&small),
        Err(GeneratorError::Dimension { .. })
    ));
}

#[test]
fn decoding_is_bounded_and_checks_dimensions() {
    let (gen, _) = nets(8);
    let id = vec![0.25f32; 16];
    let img = gen.decode(&[0.0; 8], &id).unwrap();
    assert!(img
        .pixels()
        .iter()
        .all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
    assert!(matches!(
        gen.decode(&[0.0; 4], &id),
        Err(GeneratorError::Dimension {
            expected: 8,
            found: 4
        })
    ));
    assert!(matches!(
        gen.decode(&[0.0; 8], &id[..10]),
        Err(GeneratorError::Dimension { .. })
    ));
    let (flat, _) = nets(0);
    assert!(flat.decode(&[], &id).is_ok());
}

#[test]
fn short_training_is_finite_and_deterministic() {
    let imgs = faces(8, 4);
    let (_, enc) = nets(8);
    let cfg = GeneratorConfig {
        k: 4,
        iterations: 5,
        batch: 4,
        ..GeneratorConfig::default()
    };
    let (g1, h1) = train_generator(&imgs, &enc, &cfg).unwrap();
    let (g2, h2) = train_generator(&imgs, &enc, &cfg).unwrap();
    assert_eq!(g1, g2);
    assert_eq!(h1, h2);
    assert!(h1.iter().all(|b| b.total.is_finite()));
    // λ_ID = 0 skips the encoder pass and reports a zero identity term
    let no_id = GeneratorConfig {
        weights: LossWeights {
            id: 0.0,
            ..LossWeights::default()
        },
        ..cfg.clone()
    };
    let (_, h) = train_generator(&imgs, &enc, &no_id).unwrap();
    assert!(h.iter().all(|b| b.id == 0.0));
    let bad = GeneratorConfig {
        weights: LossWeights {
            tv: -1.0,
            ..LossWeights::default()
        },
        ..cfg
    };
    assert!(matches!(
        train_generator(&imgs, &enc, &bad),
        Err(GeneratorError::Config(_))
    ));
}

#[test]
fn checkpoints_round_trip() {
    let (gen, enc) = nets(8);
    assert_eq!(
        Generator::from_checkpoint(gen.to_checkpoint("h")).unwrap(),
        gen
    );
    assert_eq!(
        IdEncoder::from_checkpoint(enc.to_checkpoint("h")).unwrap(),
        enc
    );
    assert!(Generator::from_checkpoint(enc.to_checkpoint("h")).is_err());
}

#[test]
fn synthesis_relabels_and_validates_age() {
    let imgs = faces(2, 5);
    let (gen, enc) = nets(8);
    let fam = FamParams::identity_init(&mut ChaCha8Rng::seed_from_u64(0), 16, 0.0);
    let out = synthesize_aged(&fam, &gen, &enc, &imgs[0], 12.0).unwrap();
    assert_eq!(out.subject_id, imgs[0].subject_id);
    assert_eq!(out.style_id, imgs[0].style_id);
    assert_eq!(out.age, 12.0);
    assert!(synthesize_aged(&fam, &gen, &enc, &imgs[0], 25.0).is_err());
    let mismatched = Generator::init(
        &mut ChaCha8Rng::seed_from_u64(1),
        32,
        8,
        LossWeights::default(),
    );
    assert!(matches!(
        synthesize_aged(&fam, &mismatched, &enc, &imgs[0], 12.0),
        Err(GeneratorError::Dimension { .. })
    ));
}

#[test]
fn encoder_embeddings_are_unit_norm() {
    let imgs = faces(3, 6);
    let (_, enc) = nets(0);
    for e in enc.encode(&imgs.iter().collect::<Vec<_>>()).unwrap() {
        let n: f32 = e.vector().iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() <= 1e-4);
    }
}
