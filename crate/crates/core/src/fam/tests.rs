use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataio::{ManifestRecord, Split};
use crate::numgrad::gradcheck::check_gradients;

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn cos(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn untrained_map_is_near_identity_at_equal_ages() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fam = FamParams::identity_init(&mut rng, 64, 0.01);
    for _ in 0..20 {
        let e = FaceEmbedding::new("s", 7.0, unit(&mut rng, 64)).unwrap();
        let out = age_feature(&fam, &e, AgePair::new(7.0, 7.0).unwrap()).unwrap();
        assert!(cos(out.vector(), e.vector()) >= 0.99);
        assert_eq!(out.subject_id, "s");
        assert_eq!(out.age, 7.0);
    }
    // no noise: exact identity
    let exact = FamParams::identity_init(&mut rng, 8, 0.0);
    let e = FaceEmbedding::new("s", 4.0, unit(&mut rng, 8)).unwrap();
    let out = age_feature(&exact, &e, AgePair::new(4.0, 4.0).unwrap()).unwrap();
    for (a, b) in out.vector().iter().zip(e.vector()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn outputs_are_unit_norm_and_relabelled() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fam = FamParams::identity_init(&mut rng, 16, 0.3);
    for t in [2.0, 9.5, 20.0] {
        let e = FaceEmbedding::new("x", 3.0, unit(&mut rng, 16)).unwrap();
        let out = age_feature(&fam, &e, AgePair::new(3.0, t).unwrap()).unwrap();
        let n = out.vector().iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() <= 1e-4);
        assert_eq!(out.age, t);
    }
}

#[test]
fn errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fam = FamParams::identity_init(&mut rng, 8, 0.0);
    let e = FaceEmbedding::new("x", 3.0, unit(&mut rng, 4)).unwrap();
    assert!(matches!(
        age_feature(&fam, &e, AgePair::new(3.0, 5.0).unwrap()),
        Err(FamError::Dimension {
            expected: 8,
            found: 4
        })
    ));
    assert!(matches!(
        AgePair::new(1.0, 5.0),
        Err(FamError::AgeOutOfRange(_))
    ));
    assert!(matches!(
        AgePair::new(3.0, 21.0),
        Err(FamError::AgeOutOfRange(_))
    ));
    assert!(matches!(fam_loss(&fam, &[]), Err(FamError::EmptyBatch)));
    let a = FaceEmbedding::new("a", 3.0, unit(&mut rng, 8)).unwrap();
    let b = FaceEmbedding::new("b", 9.0, unit(&mut rng, 8)).unwrap();
    assert!(matches!(
        fam_loss(
            &fam,
            &[EmbeddingPair {
                source: a,
                target: b
            }]
        ),
        Err(FamError::NotGenuine(..))
    ));
}

#[test]
fn loss_hand_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fam = FamParams::identity_init(&mut rng, 2, 0.0);
    let pair = EmbeddingPair {
        source: FaceEmbedding::new("s", 3.0, vec![1.0, 0.0]).unwrap(),
        target: FaceEmbedding::new("s", 13.0, vec![0.0, 1.0]).unwrap(),
    };
    assert!((fam_loss(&fam, &[pair.clone()]).unwrap() - 2.0).abs() < 1e-6);
    assert!((identity_loss(&[pair.clone()]).unwrap() - 2.0).abs() < 1e-6);
    let same = EmbeddingPair {
        source: pair.source.clone(),
        target: pair.source.clone().with_age(13.0),
    };
    assert!(fam_loss(&fam, &[same]).unwrap().abs() < 1e-10);
}

#[test]
fn identity_loss_is_two_minus_two_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pairs: Vec<EmbeddingPair> = (0..50)
        .map(|_| EmbeddingPair {
            source: FaceEmbedding::new("s", 3.0, unit(&mut rng, 16)).unwrap(),
            target: FaceEmbedding::new("s", 12.0, unit(&mut rng, 16)).unwrap(),
        })
        .collect();
    let c = pairs
        .iter()
        .map(|p| cos(p.source.vector(), p.target.vector()) as f64)
        .sum::<f64>()
        / 50.0;
    assert!((identity_loss(&pairs).unwrap() as f64 - 2.0 * (1.0 - c)).abs() < 1e-4);
}

fn toy_training_set(n_subjects: usize, seed: u64) -> (Manifest, Vec<FaceEmbedding>) {
    // aging rotates the first two coordinates by an angle proportional to the gap
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut embs = Vec::new();
    for s in 0..n_subjects {
        let base = unit(&mut rng, 8);
        for (j, age) in [3.0f32, 8.0, 13.0].into_iter().enumerate() {
            let th = (age - 3.0) * 0.08;
            let mut v = base.clone();
            v[0] = base[0] * th.cos() - base[1] * th.sin();
            v[1] = base[0] * th.sin() + base[1] * th.cos();
            v[2] += 0.05 * age;
            records.push(ManifestRecord {
                subject_id: format!("t{s}"),
                age,
                style_id: "st0".into(),
                split: Split::Train,
                path: format!("p{s}_{j}"),
            });
            embs.push(FaceEmbedding::normalized(format!("t{s}"), age, v).unwrap());
        }
    }
    (Manifest::new(records).unwrap(), embs)
}

#[test]
fn zero_iterations_returns_initialization() {
    let (m, e) = toy_training_set(10, 6);
    let cfg = FamConfig {
        iterations: 0,
        ..FamConfig::default()
    };
    let (fam, history) = train_fam(&cfg, &m, &e).unwrap();
    let init =
        FamParams::identity_init(&mut ChaCha8Rng::seed_from_u64(cfg.seed), 8, cfg.init_noise);
    assert_eq!(fam, init);
    assert!(history.is_empty());
}

#[test]
fn training_beats_identity_and_is_deterministic() {
    let (m, e) = toy_training_set(60, 7);
    let (hm, he) = toy_training_set(30, 8);
    let cfg = FamConfig {
        iterations: 1500,
        adam: AdamConfig {
            learning_rate: 2e-3,
            ..AdamConfig::default()
        },
        ..FamConfig::default()
    };
    let (fam, history) = train_fam(&cfg, &m, &e).unwrap();
    let pairs = embedding_pairs(&hm, &he).unwrap();
    let (trained, base) = (
        fam_loss(&fam, &pairs).unwrap(),
        identity_loss(&pairs).unwrap(),
    );
    assert!(trained < 0.5 * base, "{trained} vs {base}");
    let smooth = moving_average(&history, 50);
    assert!(smooth[smooth.len() - 1] < smooth[49]);
    let (again, _) = train_fam(&cfg, &m, &e).unwrap();
    assert_eq!(fam, again);
}

#[test]
fn divergence_keeps_last_good_parameters() {
    let (m, e) = toy_training_set(10, 9);
    let cfg = FamConfig {
        iterations: 50,
        adam: AdamConfig {
            learning_rate: 1e38,
            ..AdamConfig::default()
        },
        ..FamConfig::default()
    };
    match train_fam(&cfg, &m, &e) {
        Err(FamError::Diverged { last_good, .. }) => assert!(last_good.params().all_finite()),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let fam = FamParams::identity_init(&mut rng, 12, 0.05);
    let back = FamParams::from_checkpoint(fam.to_checkpoint("abc")).unwrap();
    assert_eq!(back, fam);
    let mut wrong = fam.to_checkpoint("abc");
    wrong.meta.d = 10;
    assert!(FamParams::from_checkpoint(wrong).is_err());
}

#[test]
fn moving_average_window() {
    assert_eq!(
        moving_average(&[1.0, 3.0, 5.0, 7.0], 2),
        vec![1.0, 2.0, 4.0, 6.0]
    );
}

#[test]
fn network_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 5;
    let fam = FamParams::identity_init(&mut rng, d, 0.3);
    let mut p64 = crate::numgrad::ParamSet::<f64>::new();
    for (name, t) in fam.params().iter() {
        p64.insert(name.clone(), t.cast());
    }
    let x: Vec<f64> = (0..3 * d)
        .map(|i| ((i * 7 % 11) as f64 - 5.0) / 6.0)
        .collect();
    let y: Vec<f64> = (0..3 * d)
        .map(|i| ((i * 5 % 9) as f64 - 4.0) / 5.0)
        .collect();
    let ages = vec![0.15, 0.65, 0.4, 0.1, 0.9, 0.3];
    let checks = check_gradients(&p64, 1e-5, |tape, b| {
        let xv = tape.constant(Tensor::new(vec![3, d], x.clone())?)?;
        let yv = tape.constant(Tensor::new(vec![3, d], y.clone())?)?;
        let av = tape.constant(Tensor::new(vec![3, 2], ages.clone())?)?;
        let input = tape.concat(&[xv, av])?;
        let h = tape.affine(input, b.get("fam.l1.w")?, b.get("fam.l1.b")?)?;
        let h = tape.leaky_relu(h, 0.2)?;
        let o = tape.affine(h, b.get("fam.l2.w")?, b.get("fam.l2.b")?)?;
        let o = tape.l2_normalize(o)?;
        tape.squared_distance_mean(o, yv)
    })
    .unwrap();
    for c in checks {
        assert!(c.rel_error <= 1e-4, "{}: {}", c.name, c.rel_error);
    }
}

#[test]
fn paper_preset_echo() {
    let cfg = FamConfig::paper();
    assert_eq!(cfg.iterations, 200_000);
    assert_eq!(cfg.batch, 64);
    assert_eq!(cfg.adam.learning_rate, 2e-4);
    assert_eq!(cfg.adam.beta1, 0.5);
    assert_eq!(cfg.adam.beta2, 0.99);
}
