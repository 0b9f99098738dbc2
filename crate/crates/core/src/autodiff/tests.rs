use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;
use crate::wavelet::{Wavelet, WaveletLayout};

const TOL: f64 = 1e-6;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Fixed random projection so the checked function is a generic scalar.
fn project(g: &mut Graph<f64>, x: NodeId, seed: u64) -> crate::Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(rand_tensor(&shape, seed));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn check<F>(inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> crate::Result<NodeId>,
{
    let r = finite_diff_check(inputs, build, 1e-5, None).unwrap();
    assert!(r.max_error < TOL, "max error {} at {:?}", r.max_error, r.worst);
}

#[test]
fn conv2d_same_with_bias_and_relu() {
    let x = rand_tensor(&[2, 3, 5, 4], 1);
    let w = rand_tensor(&[4, 3, 3, 3], 2);
    let b = rand_tensor(&[4], 3);
    check(&[x, w, b], |g, ids| {
        let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, Padding::Same, true)?;
        project(g, y, 9)
    });
}

#[test]
fn conv2d_strided_valid_no_bias() {
    let x = rand_tensor(&[1, 2, 7, 6], 4);
    let w = rand_tensor(&[3, 2, 3, 2], 5);
    check(&[x, w], |g, ids| {
        let y = g.conv2d(ids[0], ids[1], None, 2, Padding::Valid, false)?;
        project(g, y, 10)
    });
}

#[test]
fn dense_and_softmax_cross_entropy() {
    let x = rand_tensor(&[3, 5], 6);
    let w = rand_tensor(&[5, 4], 7);
    let b = rand_tensor(&[4], 8);
    check(&[x, w, b], |g, ids| {
        let y = g.dense(ids[0], ids[1], Some(ids[2]), false)?;
        let p = g.softmax(y)?;
        g.sparse_cross_entropy(p, &[0, 3, 1])
    });
}

#[test]
fn dense_relu() {
    let x = rand_tensor(&[4, 6], 11);
    let w = rand_tensor(&[6, 3], 12);
    check(&[x, w], |g, ids| {
        let y = g.dense(ids[0], ids[1], None, true)?;
        project(g, y, 13)
    });
}

#[test]
fn elementwise_ops() {
    let a = rand_tensor(&[2, 3, 4], 14);
    let b = rand_tensor(&[2, 3, 4], 15);
    check(&[a, b], |g, ids| {
        let s = g.sigmoid(ids[0]);
        let r = g.relu(ids[1]);
        let m = g.mul(s, r)?;
        let d = g.sub(m, ids[0])?;
        let q = g.square(d);
        let e = g.add(q, ids[1])?;
        let f = g.affine(e, 0.7, -0.2);
        let c = g.clamp(f, -0.5, 0.5);
        let t = project(g, c, 16)?;
        let mean = g.mean(ids[0]);
        let two = g.add(t, mean)?;
        Ok(two)
    });
}

#[test]
fn broadcast_reshape_select() {
    let a = rand_tensor(&[3, 1, 2], 17);
    let b = rand_tensor(&[2], 18);
    check(&[a, b], |g, ids| {
        let x = g.broadcast_to(ids[0], &[2, 3, 4, 2])?;
        let y = g.broadcast_to(ids[1], &[2, 3, 4, 2])?;
        let z = g.mul(x, y)?;
        let r = g.reshape(z, &[6, 8])?;
        let c = g.select_column(r, 5)?;
        project(g, c, 19)
    });
}

#[test]
fn pooling_ops() {
    let x = rand_tensor(&[2, 3, 4, 6], 20);
    check(&[x], |g, ids| {
        let a = g.global_avg_pool(ids[0])?;
        let m = g.global_max_pool(ids[0])?;
        let s = g.add(a, m)?;
        let cm = g.channel_mean(ids[0])?;
        let cx = g.channel_max(ids[0])?;
        let cat = g.concat_channels(cm, cx)?;
        let p = g.maxpool2d(ids[0])?;
        let t1 = project(g, s, 21)?;
        let t2 = project(g, cat, 22)?;
        let t3 = project(g, p, 23)?;
        let u = g.add(t1, t2)?;
        g.add(u, t3)
    });
}

#[test]
fn attention_scaling() {
    let x = rand_tensor(&[2, 3, 4, 5], 24);
    let cg = rand_tensor(&[2, 3], 25);
    let sg = rand_tensor(&[2, 1, 4, 5], 26);
    check(&[x, cg, sg], |g, ids| {
        let a = g.scale_channels(ids[0], ids[1])?;
        let b = g.scale_spatial(a, ids[2])?;
        project(g, b, 27)
    });
}

#[test]
fn batch_norm_train_and_infer() {
    let x = rand_tensor(&[3, 2, 3, 3], 28);
    let gamma = rand_tensor(&[2], 29);
    let beta = rand_tensor(&[2], 30);
    for mode in [NormMode::Train, NormMode::Infer] {
        check(&[x.clone(), gamma.clone(), beta.clone()], |g, ids| {
            let y = g.batch_norm(ids[0], ids[1], ids[2], &[0.1, -0.2], &[0.5, 1.5], mode, 1e-3)?;
            project(g, y, 31)
        });
    }
}

#[test]
fn batch_norm_train_normalizes() {
    let x = rand_tensor(&[4, 2, 3, 3], 32);
    let mut g = Graph::new();
    let xi = g.constant(x);
    let gamma = g.constant(Tensor::ones([2]));
    let beta = g.constant(Tensor::zeros([2]));
    let y = g
        .batch_norm(xi, gamma, beta, &[0.0; 2], &[1.0; 2], NormMode::Train, 0.0)
        .unwrap();
    let v = g.value(y).data();
    for ch in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| v[(b * 2 + ch) * 9..(b * 2 + ch + 1) * 9].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }
    assert!(g.batch_stats(y).is_some());
}

#[test]
fn dropout_mask_scales_gradient() {
    let x = rand_tensor(&[2, 3], 33);
    check(&[x], |g, ids| {
        let y = g.dropout_with_mask(ids[0], vec![2.0, 0.0, 2.0, 2.0, 0.0, 0.0])?;
        project(g, y, 34)
    });
}

#[test]
fn idwt_gradient_is_analysis() {
    let layout = WaveletLayout::new(Wavelet::Db2, 2, 2, 9, 8).unwrap();
    let c = rand_tensor(&[1, 2, layout.coeff_len()], 35);
    check(&[c], |g, ids| {
        let y = g.idwt2(ids[0], &layout)?;
        project(g, y, 36)
    });
}

#[test]
fn retained_intermediate_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let y = g.affine(x, 3.0, 0.0);
    let z = g.square(y);
    let s = g.sum(z);
    let grads = g.backward(s, &[y]).unwrap();
    assert_eq!(grads.get(y).unwrap().data(), &[6.0, 12.0]);
    assert_eq!(grads.get(x).unwrap().data(), &[18.0, 36.0]);
    assert!(grads.get(z).is_none());
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones([3]));
    let w = g.variable(Tensor::ones([3]));
    let p = g.mul(x, w).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s, &[]).unwrap();
    assert!(grads.get(x).is_none());
    assert_eq!(grads.get(w).unwrap().data(), &[1.0; 3]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::ones([3]));
    assert!(g.backward(x, &[]).is_err());
}

#[test]
fn cross_entropy_clips_probabilities() {
    let mut g = Graph::<f64>::new();
    let p = g.variable(Tensor::new([1, 2], vec![0.0, 1.0]).unwrap());
    let l = g.sparse_cross_entropy(p, &[0]).unwrap();
    let v = g.value(l).data()[0];
    assert!((v - (-(1e-7f64).ln())).abs() < 1e-9);
    assert!(g.backward(l, &[]).unwrap().get(p).unwrap().all_finite());
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([3, 2]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.starts_with("add:"), "{err}");
    let err = g.maxpool2d(a).unwrap_err().to_string();
    assert!(err.starts_with("maxpool2d:"), "{err}");
}

#[test]
fn dropout_mask_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mask: Vec<f32> = dropout_mask(1_000_000, 0.25, &mut rng).unwrap();
    let kept = mask.iter().filter(|&&m| m != 0.0).count() as f64 / 1e6;
    assert!((kept - 0.75).abs() < 0.01, "{kept}");
    assert!(mask.iter().all(|&m| m == 0.0 || (m - 4.0 / 3.0).abs() < 1e-6));
    let ones: Vec<f32> = dropout_mask(100, 0.0, &mut rng).unwrap();
    assert!(ones.iter().all(|&m| m == 1.0));
    assert!(dropout_mask::<f32, _>(10, 1.0, &mut rng).is_err());
    assert!(dropout_mask::<f32, _>(10, -0.1, &mut rng).is_err());
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = Tensor::<f32>::from_fn([1, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::<f32>::from_fn([4, 3, 3, 3], |_| rng.random_range(-1.0..1.0));
    let b = Tensor::<f32>::from_fn([4], |_| rng.random_range(-1.0..1.0));
    let mut g = Graph::new();
    let (xi, wi, bi) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xi, wi, Some(bi), 1, Padding::Same, false).unwrap();
    let (xd, wd) = (x.data(), w.data());
    for o in 0..4 {
        for oy in 0..8 {
            for ox in 0..8 {
                let mut acc = b.data()[o] as f64;
                for c in 0..3 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = oy as isize + ky as isize - 1;
                            let ix = ox as isize + kx as isize - 1;
                            if (0..8).contains(&iy) && (0..8).contains(&ix) {
                                acc += (wd[((o * 3 + c) * 3 + ky) * 3 + kx] * xd[(c * 8 + iy as usize) * 8 + ix as usize])
                                    as f64;
                            }
                        }
                    }
                }
                let got = g.value(y).data()[(o * 8 + oy) * 8 + ox] as f64;
                assert!((got - acc).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn conv_identity_kernel_and_parameter_count() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full([1, 1, 1, 1], 5.0));
    let w = g.constant(Tensor::ones([1, 1, 1, 1]));
    let y = g.conv2d(x, w, None, 1, Padding::Same, false).unwrap();
    assert_eq!(g.value(y).data(), &[5.0]);
    let bad = g.constant(Tensor::ones([2, 3, 3, 3]));
    let err = g.conv2d(x, bad, None, 1, Padding::Same, false).unwrap_err().to_string();
    assert!(err.contains("channel"), "{err}");
}

#[test]
fn activation_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([1, 2], vec![0.0, 0.0]).unwrap());
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    let sg = g.sigmoid(x);
    assert_eq!(g.value(sg).data(), &[0.5, 0.5]);
    let n = g.constant(Tensor::scalar(-3.0));
    let r = g.relu(n);
    assert_eq!(g.value(r).data(), &[0.0]);
    let ce = g.sparse_cross_entropy(s, &[1]).unwrap();
    assert!((g.value(ce).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn cross_entropy_matches_hand_computation() {
    let probs = vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5];
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::new([3, 2], probs).unwrap());
    let l = g.sparse_cross_entropy(p, &[0, 0, 1]).unwrap();
    let expected = -(0.7f64.ln() + 0.2f64.ln() + 0.5f64.ln()) / 3.0;
    assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
    assert!(g.sparse_cross_entropy(p, &[0, 2, 1]).is_err());
}

#[test]
fn adam_matches_scalar_recurrence() {
    let cfg = AdamConfig::default();
    let mut p = Tensor::<f64>::new([1], vec![0.5]).unwrap();
    let mut opt = Adam::new(cfg);
    let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    for t in 1..=10 {
        let grad = 3.0 * w * w - 1.0;
        let g = Tensor::new([1], vec![3.0 * p.data()[0].powi(2) - 1.0]).unwrap();
        opt.step(&mut [&mut p], &[&g], &["w"]).unwrap();
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad;
        let mh = m / (1.0 - cfg.beta1.powi(t));
        let vh = v / (1.0 - cfg.beta2.powi(t));
        w -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        assert!((p.data()[0] - w).abs() < 1e-7, "step {t}");
    }
    assert_eq!(opt.steps_taken(), 10);
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut p = Tensor::<f32>::new([2], vec![1.0, 2.0]).unwrap();
    let mut opt = Adam::new(AdamConfig::default());
    opt.step(&mut [&mut p], &[&Tensor::zeros([2])], &["p"]).unwrap();
    assert_eq!(p.data(), &[1.0, 2.0]);
}

#[test]
fn finite_difference_of_sum_of_squares() {
    let x = Tensor::<f64>::new([2], vec![1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let xi = g.variable(x.clone());
    let q = g.square(xi);
    let s = g.sum(q);
    assert_eq!(g.backward(s, &[]).unwrap().get(xi).unwrap().data(), &[2.0, 4.0]);
    let r = finite_diff_check(
        &[x],
        |g, ids| {
            let q = g.square(ids[0]);
            Ok(g.sum(q))
        },
        1e-3,
        None,
    )
    .unwrap();
    assert!(r.max_error < 1e-8);
}

#[test]
fn conv_relu_sum_gradient_at_coarse_step() {
    let x = rand_tensor(&[1, 3, 6, 6], 42);
    let w = rand_tensor(&[2, 3, 3, 3], 43);
    let r = finite_diff_check(
        &[x, w],
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], None, 1, Padding::Same, true)?;
            Ok(g.sum(y))
        },
        1e-3,
        None,
    )
    .unwrap();
    assert!(r.max_error < 1e-4, "{r:?}");
}
