use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn affine_hand_cases() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 2], &[1.0, 2.0])).unwrap();
    let w = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let b = tape.constant(t64(&[2], &[0.0, 0.0])).unwrap();
    let y = tape.affine(x, w, b).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[1.0, 2.0]);

    let x = tape.constant(t64(&[1, 2], &[1.0, 1.0])).unwrap();
    let w = tape.constant(t64(&[2, 2], &[2.0, 3.0, 4.0, 5.0])).unwrap();
    let b = tape.constant(t64(&[2], &[1.0, 1.0])).unwrap();
    let y = tape.affine(x, w, b).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[7.0, 9.0]);
}

#[test]
fn affine_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, p, q) = (3, 5, 4);
    let x = Tensor::<f32>::from_fn(&[n, p], |_| rng.gen_range(-1.0..1.0));
    let w = Tensor::<f32>::from_fn(&[p, q], |_| rng.gen_range(-1.0..1.0));
    let b = Tensor::<f32>::from_fn(&[q], |_| rng.gen_range(-1.0..1.0));
    let mut tape = Tape::<f32>::new();
    let (xv, wv, bv) = (
        tape.constant(x.clone()).unwrap(),
        tape.constant(w.clone()).unwrap(),
        tape.constant(b.clone()).unwrap(),
    );
    let y = tape.affine(xv, wv, bv).unwrap();
    let got = tape.value(y).unwrap();
    for i in 0..n {
        for j in 0..q {
            let mut acc = b.data()[j];
            for k in 0..p {
                acc += x.data()[i * p + k] * w.data()[k * q + j];
            }
            assert!((got.data()[i * q + j] - acc).abs() <= 1e-6);
        }
    }
}

#[test]
fn affine_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let w = tape.constant(Tensor::zeros(&[4, 2])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2])).unwrap();
    let err = tape.affine(x, w, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn leaky_relu_values_and_slope_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param("x", t64(&[3], &[-1.0, 0.0, 2.0])).unwrap();
    let y = tape.leaky_relu(x, 0.2).unwrap();
    let got = tape.value(y).unwrap().data().to_vec();
    assert!((got[0] + 0.2).abs() < 1e-12 && got[1] == 0.0 && got[2] == 2.0);
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert!((g.get("x").unwrap().data()[0] - 0.2).abs() < 1e-12);
    assert_eq!(g.get("x").unwrap().data()[2], 1.0);

    let mut tape = Tape::<f32>::new();
    let x = tape
        .constant(Tensor::new(vec![3], vec![0.5, 1.0, 3.0]).unwrap())
        .unwrap();
    let y = tape.leaky_relu(x, 0.2).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[0.5, 1.0, 3.0]);
    assert!(tape.leaky_relu(x, 1.5).is_err());
}

#[test]
fn leaky_relu_rejects_non_finite_input() {
    let mut tape = Tape::<f32>::new();
    // constants are checked at push time too
    assert!(tape
        .constant(Tensor::new(vec![1], vec![f32::NAN]).unwrap())
        .is_err());
}

#[test]
fn instance_norm_constant_channel_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape
        .constant(Tensor::from_fn(&[1, 2, 2, 2], |i| {
            if i % 2 == 0 {
                3.0
            } else {
                i as f64
            }
        }))
        .unwrap();
    let g = tape.constant(t64(&[2], &[1.0, 1.0])).unwrap();
    let s = tape.constant(t64(&[2], &[0.0, 0.0])).unwrap();
    let y = tape.instance_norm(x, g, s).unwrap();
    let v = tape.value(y).unwrap().data().to_vec();
    for p in 0..4 {
        assert_eq!(v[p * 2], 0.0);
    }
}

#[test]
fn instance_norm_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::<f64>::new();
    let x = tape
        .constant(rand_t(&mut rng, &[2, 5, 3, 4]).map(|v| v * 4.0 + 1.5))
        .unwrap();
    let g = tape.constant(Tensor::full(&[4], 1.0)).unwrap();
    let s = tape.constant(Tensor::zeros(&[4])).unwrap();
    let y = tape.instance_norm(x, g, s).unwrap();
    let v = tape.value(y).unwrap();
    for b in 0..2 {
        for c in 0..4 {
            let vals: Vec<f64> = (0..15).map(|p| v.data()[(b * 15 + p) * 4 + c]).collect();
            let m = vals.iter().sum::<f64>() / 15.0;
            let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 15.0;
            assert!(m.abs() < 1e-4 && (var - 1.0).abs() < 1e-4, "{m} {var}");
        }
    }
}

#[test]
fn instance_norm_rejects_single_position() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 1, 2])).unwrap();
    let g = tape.constant(Tensor::full(&[2], 1.0)).unwrap();
    let s = tape.constant(Tensor::zeros(&[2])).unwrap();
    assert!(tape.instance_norm(x, g, s).is_err());
}

#[test]
fn instance_norm_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = ParamSet::new();
    p.insert("x", rand_t(&mut rng, &[1, 4, 4, 2]));
    p.insert("g", rand_t(&mut rng, &[2]));
    p.insert("s", rand_t(&mut rng, &[2]));
    let w = rand_t(&mut rng, &[1, 4, 4, 2]);
    let checks = check_gradients(&p, 1e-3, |tape, b| {
        let y = tape.instance_norm(b.get("x")?, b.get("g")?, b.get("s")?)?;
        let wv = tape.constant(w.clone())?;
        let z = tape.squared_distance_mean(y, wv)?;
        Ok(z)
    })
    .unwrap();
    for c in checks {
        assert!(c.rel_error <= 1e-3, "{c:?}");
    }
}

/// Explicit six-loop cross-correlation with symmetric `(k-1)/2` zero padding.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let (n, h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, co) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (w + 2 * pw - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, oh, ow, co]);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for c in 0..ci {
                                let iy = (oy * stride + ky) as isize - ph as isize;
                                let ix = (ox * stride + kx) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((b * h + iy as usize) * w + ix as usize) * ci + c]
                                    * k.data()[((ky * kw + kx) * ci + c) * co + o];
                            }
                        }
                    }
                    out.data_mut()[((b * oh + oy) * ow + ox) * co + o] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_t(&mut rng, &[2, 4, 5, 3]);
    let k = Tensor::from_fn(&[1, 1, 3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let mut tape = Tape::<f64>::new();
    let (xv, kv) = (tape.constant(x.clone()).unwrap(), tape.constant(k).unwrap());
    let y = tape.conv2d(xv, kv, 1).unwrap();
    assert_eq!(tape.value(y).unwrap(), &x);
}

#[test]
fn conv_impulse_response_is_plateau() {
    let x = Tensor::from_fn(&[1, 5, 5, 1], |i| if i == 12 { 1.0 } else { 0.0 });
    let k = Tensor::full(&[3, 3, 1, 1], 1.0);
    let mut tape = Tape::<f64>::new();
    let (xv, kv) = (tape.constant(x).unwrap(), tape.constant(k).unwrap());
    let y = tape.conv2d(xv, kv, 1).unwrap();
    let v = tape.value(y).unwrap();
    for r in 0..5 {
        for c in 0..5 {
            let expect = if (1..=3).contains(&r) && (1..=3).contains(&c) {
                1.0
            } else {
                0.0
            };
            assert_eq!(v.data()[r * 5 + c], expect, "({r},{c})");
        }
    }
}

#[test]
fn conv_matches_six_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(h, w, kh, stride) in &[(5, 6, 3, 1), (8, 8, 3, 2), (7, 5, 4, 2), (6, 6, 1, 2)] {
        let x = rand_t(&mut rng, &[2, h, w, 3]);
        let k = rand_t(&mut rng, &[kh, kh, 3, 4]);
        let mut tape = Tape::<f64>::new();
        let (xv, kv) = (
            tape.constant(x.clone()).unwrap(),
            tape.constant(k.clone()).unwrap(),
        );
        let y = tape.conv2d(xv, kv, stride).unwrap();
        let expect = conv_oracle(&x, &k, stride);
        let got = tape.value(y).unwrap();
        assert_eq!(got.shape(), expect.shape());
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}

#[test]
fn conv_kernel_larger_than_padded_input_rejected() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 1, 1])).unwrap();
    let k = tape.constant(Tensor::zeros(&[4, 4, 1, 1])).unwrap();
    assert!(tape.conv2d(x, k, 1).is_err());
}

#[test]
fn conv_transpose_doubles_extent_and_is_adjoint() {
    // <conv(x), y> == <x, conv_t(y)> for the same kernel
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for &kh in &[3usize, 4] {
        let x = rand_t(&mut rng, &[2, 8, 8, 3]);
        let k = rand_t(&mut rng, &[kh, kh, 3, 5]);
        let y = rand_t(&mut rng, &[2, 4, 4, 5]);
        let cx = conv_oracle(&x, &k, 2);
        assert_eq!(cx.shape(), y.shape());
        // the transposed layer maps 5 → 3 channels, so its kernel is the
        // forward kernel with ci/co swapped
        let kt = Tensor::from_fn(&[kh, kh, 5, 3], |i| {
            let (o, rest) = (i % 3, i / 3);
            let (c, pos) = (rest % 5, rest / 5);
            k.data()[(pos * 3 + o) * 5 + c]
        });
        let mut tape = Tape::<f64>::new();
        let (yv, kv) = (
            tape.constant(y.clone()).unwrap(),
            tape.constant(kt).unwrap(),
        );
        let t = tape.conv2d_transpose(yv, kv, 2).unwrap();
        let tv = tape.value(t).unwrap();
        assert_eq!(tv.shape(), &[2, 8, 8, 3]);
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(tv.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}

#[test]
fn backward_of_dot_product_is_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 3], &[1.0, -2.0, 0.5])).unwrap();
    let w = tape.param("w", t64(&[3, 1], &[0.3, 0.1, 0.7])).unwrap();
    let y = tape.matmul(x, w).unwrap();
    let loss = tape.sum(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get("w").unwrap().data(), &[1.0, -2.0, 0.5]);
}

#[test]
fn backward_rejects_non_scalar_and_reuse() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param("w", t64(&[2], &[1.0, 2.0])).unwrap();
    assert!(matches!(tape.backward(w), Err(GradError::NotScalar(_))));
    let s = tape.sum(w).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(GradError::StaleVar)));
}

#[test]
fn duplicate_param_rejected() {
    let mut tape = Tape::<f32>::new();
    tape.param("w", Tensor::zeros(&[1])).unwrap();
    assert!(tape.param("w", Tensor::zeros(&[1])).is_err());
}

#[test]
fn backward_visits_ops_in_reverse_recording_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::<f64>::new();
    tape.enable_trace();
    let x = tape.param("x", rand_t(&mut rng, &[1, 4, 4, 2])).unwrap();
    let k = tape.param("k", rand_t(&mut rng, &[3, 3, 2, 3])).unwrap();
    let c = tape.conv2d(x, k, 2).unwrap();
    let a = tape.leaky_relu(c, 0.2).unwrap();
    let f = tape.reshape(a, &[1, 12]).unwrap();
    let n = tape.l2_normalize(f).unwrap();
    let s = tape.scale(n, 3.0).unwrap();
    let loss = tape.sum(s).unwrap();
    let mut recorded = tape.recorded_ops();
    tape.backward(loss).unwrap();
    recorded.reverse();
    assert_eq!(tape.trace().unwrap(), recorded.as_slice());
}

#[test]
fn total_variation_hand_case() {
    let mut tape = Tape::<f32>::new();
    let x = tape
        .constant(Tensor::new(vec![1, 2, 2, 1], vec![0.0, 1.0, 0.0, 1.0]).unwrap())
        .unwrap();
    let tv = tape.total_variation(x).unwrap();
    assert_eq!(tape.value(tv).unwrap().item(), 2.0);
    let c = tape.constant(Tensor::full(&[2, 3, 3, 3], 0.4)).unwrap();
    let tv = tape.total_variation(c).unwrap();
    assert_eq!(tape.value(tv).unwrap().item(), 0.0);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::<f32>::from_fn(&[2, 8, 8, 3], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::<f32>::from_fn(&[3, 3, 3, 4], |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::<f32>::new();
        let (xv, kv) = (tape.constant(x).unwrap(), tape.constant(k).unwrap());
        let y = tape.conv2d(xv, kv, 2).unwrap();
        tape.value(y).unwrap().clone()
    };
    let (a, b) = (run(), run());
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

fn grads_of(name: &str, g: Tensor<f32>) -> Gradients<f32> {
    let mut out = Gradients::default();
    out.insert(name, g);
    out
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::new(vec![3], vec![0.5f32, -1.0, 2.0]).unwrap());
    let before = p.clone();
    let mut adam = AdamState::new(AdamConfig::default()).unwrap();
    adam.step(&mut p, &grads_of("w", Tensor::zeros(&[3])))
        .unwrap();
    assert_eq!(p, before);
    assert_eq!(adam.step_count(), 1);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    // m = 0.5, v = 0.01 → bias-corrected m̂ = 1, v̂ = 1 → Δ = -lr/(1+ε)
    let mut p = ParamSet::new();
    p.insert("p", Tensor::new(vec![1], vec![0.0f32]).unwrap());
    let mut adam = AdamState::new(AdamConfig::default()).unwrap();
    adam.step(
        &mut p,
        &grads_of("p", Tensor::new(vec![1], vec![1.0]).unwrap()),
    )
    .unwrap();
    assert!((p.get("p").unwrap().item() + 0.0002).abs() < 1e-9);
}

#[test]
fn adam_rejects_non_finite_gradient_by_name() {
    let mut p = ParamSet::new();
    p.insert("layer1.w", Tensor::new(vec![1], vec![0.0f32]).unwrap());
    let mut adam = AdamState::new(AdamConfig::default()).unwrap();
    let err = adam
        .step(
            &mut p,
            &grads_of(
                "layer1.w",
                Tensor::new(vec![1], vec![f32::INFINITY]).unwrap(),
            ),
        )
        .unwrap_err();
    assert!(err.to_string().contains("layer1.w"));
    assert_eq!(p.get("layer1.w").unwrap().item(), 0.0);
}

#[test]
fn adam_descends_convex_quadratic() {
    // f(p) = Σ (p - c)² ; after a short warmup the loss decreases every step
    let c = [1.0f32, -2.0, 0.5];
    let mut p = ParamSet::new();
    p.insert("p", Tensor::zeros(&[3]));
    let cfg = AdamConfig {
        learning_rate: 0.01,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(cfg).unwrap();
    let loss = |p: &ParamSet<f32>| -> f32 {
        p.get("p")
            .unwrap()
            .data()
            .iter()
            .zip(&c)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let mut history = Vec::new();
    for _ in 0..150 {
        let g = Tensor::from_fn(&[3], |i| 2.0 * (p.get("p").unwrap().data()[i] - c[i]));
        adam.step(&mut p, &grads_of("p", g)).unwrap();
        history.push(loss(&p));
    }
    for w in history[10..].windows(2) {
        assert!(w[1] < w[0], "{} !< {}", w[1], w[0]);
    }
}

#[test]
fn every_primitive_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut p = ParamSet::new();
    p.insert("x", rand_t(&mut rng, &[2, 6, 6, 2]));
    p.insert("k1", rand_t(&mut rng, &[3, 3, 2, 3]));
    p.insert("k2", rand_t(&mut rng, &[3, 3, 3, 2]));
    p.insert("bias", rand_t(&mut rng, &[2]));
    p.insert("w", rand_t(&mut rng, &[18, 4]));
    p.insert("b", rand_t(&mut rng, &[4]));
    let labels = [1usize, 3];
    let target = rand_t(&mut rng, &[2, 6, 6, 2]);
    let checks = check_gradients(&p, 1e-4, |tape, v| {
        let c = tape.conv2d(v.get("x")?, v.get("k1")?, 2)?;
        let a = tape.leaky_relu(c, 0.2)?;
        let t = tape.conv2d_transpose(a, v.get("k2")?, 2)?;
        let t = tape.bias_add(t, v.get("bias")?)?;
        let s = tape.sigmoid(t)?;
        let tv = tape.total_variation(s)?;
        let tg = tape.constant(target.clone())?;
        let l1 = tape.mean_abs_diff(s, tg)?;
        let f = tape.reshape(a, &[2, 27])?;
        let f = tape.concat(&[f])?;
        let f = tape.reshape(f, &[6, 9])?;
        let f = tape.scale(f, 0.5)?;
        let f = tape.reshape(f, &[3, 18])?;
        let h = tape.affine(f, v.get("w")?, v.get("b")?)?;
        let h = tape.reshape(h, &[2, 6])?;
        let n = tape.l2_normalize(h)?;
        let ce = tape.softmax_cross_entropy(n, &labels)?;
        tape.weighted_sum(&[(tv, 0.1), (l1, 1.0), (ce, 2.0)])
    })
    .unwrap();
    for c in checks {
        assert!(c.rel_error <= 1e-4, "{c:?}");
    }
}
