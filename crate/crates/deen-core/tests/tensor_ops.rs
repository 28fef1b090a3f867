//! Operation-level tests: analytic examples, independent brute-force oracles,
//! and finite-difference gradient checks.

use deen_core::tensor::gradcheck::check_gradients;
use deen_core::tensor::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randu(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Direct nested-loop cross-correlation, independent of the op.
fn conv2d_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (o, k): (usize, usize),
    stride: usize,
    pad: usize,
    dil: usize,
) -> (Vec<f64>, usize, usize) {
    let span = dil * (k - 1) + 1;
    let oh = (h + 2 * pad - span) / stride + 1;
    let ow = (w + 2 * pad - span) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky * dil) as isize - pad as isize;
                                let ix = (xx * stride + kx * dil) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += x[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                        * wt[((oi * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

#[test]
fn conv1x1_is_scalar_scale() {
    let x = Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let w = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
    let y = conv2d(&x, &w, 1, 0, 1).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.values().iter().all(|&v| v == 2.0));
}

#[test]
fn conv_zero_weight_gives_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new(&[2, 3, 5, 4], randu(&mut rng, 120)).unwrap();
    let w = Tensor::new(&[4, 3, 3, 3], vec![0.0; 108]).unwrap();
    let y = conv2d(&x, &w, 1, 1, 1).unwrap();
    assert!(y.values().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_dilated_matches_bruteforce_oracle() {
    // 1x1x5x5 ramp, 3x3 ones kernel, dilation 2, pad 2
    let x: Vec<f64> = (0..25).map(|v| v as f64).collect();
    let xt = Tensor::new(&[1, 1, 5, 5], x.clone()).unwrap();
    let wt = Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let y = conv2d(&xt, &wt, 1, 2, 2).unwrap();
    let (expect, oh, ow) = conv2d_oracle(&x, (1, 1, 5, 5), &[1.0; 9], (1, 3), 1, 2, 2);
    assert_eq!(y.shape(), &[1, 1, oh, ow]);
    for (a, b) in y.values().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn conv_random_matches_oracle_all_dilations() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for dil in 1..=3 {
        let x = randu(&mut rng, 2 * 4 * 7 * 6);
        let w = randu(&mut rng, 3 * 4 * 3 * 3);
        let xt = Tensor::new(&[2, 4, 7, 6], x.clone()).unwrap();
        let wt = Tensor::new(&[3, 4, 3, 3], w.clone()).unwrap();
        let y = conv2d(&xt, &wt, 1, dil, dil).unwrap();
        let (expect, _, _) = conv2d_oracle(&x, (2, 4, 7, 6), &w, (3, 3), 1, dil, dil);
        for (a, b) in y.values().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn conv_channel_mismatch_is_dim_error() {
    let x = Tensor::new(&[1, 2, 4, 4], vec![0.0; 32]).unwrap();
    let w = Tensor::new(&[1, 3, 3, 3], vec![0.0; 27]).unwrap();
    assert!(conv2d(&x, &w, 1, 1, 1).is_err());
}

#[test]
fn conv_window_too_small_rejected() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![0.0; 4]).unwrap();
    let w = Tensor::new(&[1, 1, 3, 3], vec![0.0; 9]).unwrap();
    assert!(conv2d(&x, &w, 1, 0, 2).is_err());
}

#[test]
fn conv1x1_equals_linear_on_reshaped_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, c, h, w, o) = (2, 3, 4, 5, 6);
    let x = randu(&mut rng, n * c * h * w);
    let wt = randu(&mut rng, o * c);
    let xt = Tensor::new(&[n, c, h, w], x.clone()).unwrap();
    let kt = Tensor::new(&[o, c, 1, 1], wt.clone()).unwrap();
    let y = conv2d(&xt, &kt, 1, 0, 1).unwrap();
    // per-pixel linear map: rows are pixels, features are channels
    let mut pix = vec![0.0; n * h * w * c];
    for ni in 0..n {
        for ci in 0..c {
            for p in 0..h * w {
                pix[(ni * h * w + p) * c + ci] = x[(ni * c + ci) * h * w + p];
            }
        }
    }
    let mut wmat = vec![0.0; c * o];
    for oi in 0..o {
        for ci in 0..c {
            wmat[ci * o + oi] = wt[oi * c + ci];
        }
    }
    let lin = linear(
        &Tensor::new(&[n * h * w, c], pix).unwrap(),
        &Tensor::new(&[c, o], wmat).unwrap(),
        None,
    )
    .unwrap();
    for ni in 0..n {
        for oi in 0..o {
            for p in 0..h * w {
                let a = y.values()[(ni * o + oi) * h * w + p];
                let b = lin.values()[(ni * h * w + p) * o + oi];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// batchnorm2d
// ---------------------------------------------------------------------------

use std::cell::RefCell;

fn bn_buffers(c: usize) -> (RefCell<Vec<f64>>, RefCell<Vec<f64>>) {
    (RefCell::new(vec![0.0; c]), RefCell::new(vec![1.0; c]))
}

#[test]
fn bn_constant_input_gives_zeros() {
    let x = Tensor::new(&[2, 2, 2, 2], vec![3.0; 16]).unwrap();
    let gamma = Tensor::new(&[2], vec![1.0; 2]).unwrap();
    let beta = Tensor::new(&[2], vec![0.0; 2]).unwrap();
    let (rm, rv) = bn_buffers(2);
    let y = batchnorm2d(&x, &gamma, &beta, &rm, &rv, BnMode::Train, 0.1, 1e-5).unwrap();
    assert!(y.values().iter().all(|&v| v.abs() < 1e-9));
}

#[test]
fn bn_affine_on_standardized_input() {
    // zero-mean unit-(population)-var per channel, scale 2 shift 3 -> 2x + 3
    let vals = vec![-1.0, 1.0, -1.0, 1.0];
    let x = Tensor::new(&[4, 1, 1, 1], vals.clone()).unwrap();
    let gamma = Tensor::new(&[1], vec![2.0]).unwrap();
    let beta = Tensor::new(&[1], vec![3.0]).unwrap();
    let (rm, rv) = bn_buffers(1);
    let y = batchnorm2d(&x, &gamma, &beta, &rm, &rv, BnMode::Train, 0.1, 1e-5).unwrap();
    for (a, &v) in y.values().iter().zip(&vals) {
        assert!((a - (2.0 * v + 3.0)).abs() < 1e-4);
    }
}

#[test]
fn bn_matches_two_pass_statistics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, c, h, w) = (4, 3, 2, 2);
    let x = randu(&mut rng, n * c * h * w);
    let gamma: Vec<f64> = randu(&mut rng, c);
    let beta: Vec<f64> = randu(&mut rng, c);
    let xt = Tensor::new(&[n, c, h, w], x.clone()).unwrap();
    let gt = Tensor::new(&[c], gamma.clone()).unwrap();
    let bt = Tensor::new(&[c], beta.clone()).unwrap();
    let (rm, rv) = bn_buffers(c);
    let eps = 1e-5;
    let y = batchnorm2d(&xt, &gt, &bt, &rm, &rv, BnMode::Train, 0.1, eps).unwrap();
    // two-pass oracle
    let m = (n * h * w) as f64;
    for ci in 0..c {
        let mut mean = 0.0;
        for ni in 0..n {
            for p in 0..h * w {
                mean += x[(ni * c + ci) * h * w + p];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for ni in 0..n {
            for p in 0..h * w {
                let d = x[(ni * c + ci) * h * w + p] - mean;
                var += d * d;
            }
        }
        var /= m;
        for ni in 0..n {
            for p in 0..h * w {
                let idx = (ni * c + ci) * h * w + p;
                let expect = gamma[ci] * (x[idx] - mean) / (var + eps).sqrt() + beta[ci];
                assert!((y.values()[idx] - expect).abs() < 1e-10);
            }
        }
        // running stats updated with momentum 0.1 from (0, 1)
        assert!((rm.borrow()[ci] - 0.1 * mean).abs() < 1e-12);
        assert!((rv.borrow()[ci] - (0.9 + 0.1 * var)).abs() < 1e-12);
    }
}

#[test]
fn bn_degenerate_batch_rejected() {
    let x = Tensor::new(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
    let gamma = Tensor::new(&[2], vec![1.0; 2]).unwrap();
    let beta = Tensor::new(&[2], vec![0.0; 2]).unwrap();
    let (rm, rv) = bn_buffers(2);
    assert!(batchnorm2d(&x, &gamma, &beta, &rm, &rv, BnMode::Train, 0.1, 1e-5).is_err());
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

#[test]
fn linear_identity_weight_preserves_input() {
    let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let w = Tensor::new(&[3, 3], eye).unwrap();
    let b = Tensor::new(&[3], vec![0.0; 3]).unwrap();
    let y = linear(&x, &w, Some(&b)).unwrap();
    assert_eq!(y.values(), x.values());
}

#[test]
fn linear_zero_input_broadcasts_bias() {
    let x = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
    let w = Tensor::new(&[3, 2], vec![1.0; 6]).unwrap();
    let b = Tensor::new(&[2], vec![5.0, -1.0]).unwrap();
    let y = linear(&x, &w, Some(&b)).unwrap();
    assert_eq!(y.values(), &[5.0, -1.0, 5.0, -1.0]);
}

#[test]
fn linear_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randu(&mut rng, 6);
    let w = randu(&mut rng, 6);
    let y = linear(
        &Tensor::new(&[2, 3], x.clone()).unwrap(),
        &Tensor::new(&[3, 2], w.clone()).unwrap(),
        None,
    )
    .unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += x[i * 3 + k] * w[k * 2 + j];
            }
            assert!((y.values()[i * 2 + j] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_dim_mismatch_rejected() {
    let x = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
    let w = Tensor::new(&[4, 2], vec![0.0; 8]).unwrap();
    assert!(linear(&x, &w, None).is_err());
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

#[test]
fn softmax_uniform_slice() {
    let x = Tensor::new(&[1, 4], vec![0.7; 4]).unwrap();
    let y = softmax(&x, 1).unwrap();
    for &v in y.values() {
        assert!((v - 0.25).abs() < 1e-12);
    }
}

#[test]
fn softmax_analytic_ln2() {
    let x = Tensor::new(&[2], vec![0.0, (2.0f64).ln()]).unwrap();
    let y = softmax(&x, 0).unwrap();
    assert!((y.values()[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((y.values()[1] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn softmax_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = randu(&mut rng, 12);
    let shifted: Vec<f64> = x.iter().map(|v| v + 123.456).collect();
    let a = softmax(&Tensor::new(&[3, 4], x).unwrap(), 1).unwrap();
    let b = softmax(&Tensor::new(&[3, 4], shifted).unwrap(), 1).unwrap();
    for (u, v) in a.values().iter().zip(b.values()) {
        assert!((u - v).abs() < 1e-9);
    }
}

// ---------------------------------------------------------------------------
// pooling / elementwise
// ---------------------------------------------------------------------------

#[test]
fn gap_constant_and_1x1() {
    let x = Tensor::new(&[1, 2, 3, 3], vec![4.0; 18]).unwrap();
    let y = global_avg_pool(&x).unwrap();
    assert_eq!(y.shape(), &[1, 2]);
    assert!(y.values().iter().all(|&v| (v - 4.0).abs() < 1e-12));

    let x = Tensor::new(&[2, 3, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let y = global_avg_pool(&x).unwrap();
    assert_eq!(y.values(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn gap_matches_loop_sum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = randu(&mut rng, 2 * 3 * 4 * 5);
    let y = global_avg_pool(&Tensor::new(&[2, 3, 4, 5], x.clone()).unwrap()).unwrap();
    for i in 0..6 {
        let s: f64 = x[i * 20..(i + 1) * 20].iter().sum();
        assert!((y.values()[i] - s / 20.0).abs() < 1e-12);
    }
}

#[test]
fn relu_example() {
    let y = relu(&Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    assert_eq!(y.values(), &[0.0, 0.0, 2.0]);
}

#[test]
fn euclidean_distance_examples() {
    let u = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
    let v = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
    let d = euclidean_distance(&u, &v).unwrap();
    assert!((d.item() - 5.0).abs() < 1e-5);
    let z = euclidean_distance(&v, &v).unwrap();
    assert!(z.item().abs() <= 1e-6);
}

#[test]
fn concat_shape_mismatch_rejected() {
    let a = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
    let b = Tensor::new(&[2, 4], vec![0.0; 8]).unwrap();
    assert!(concat(&[a.clone(), b], 0).is_err());
    let c = Tensor::new(&[3, 3], vec![0.0; 9]).unwrap();
    assert!(concat(&[a, c], 0).is_ok());
}

// ---------------------------------------------------------------------------
// gradient checks (finite differences, double precision)
// ---------------------------------------------------------------------------

#[test]
fn gradcheck_conv2d_all_dilations() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for dil in 1..=3 {
        for _ in 0..3 {
            let x = randu(&mut rng, 1 * 2 * 7 * 7);
            let w = randu(&mut rng, 2 * 2 * 3 * 3);
            let report = check_gradients(
                |t| Ok(sum(&conv2d(&t[0], &t[1], 1, dil, dil)?)),
                &[(vec![1, 2, 7, 7], x), (vec![2, 2, 3, 3], w)],
            )
            .unwrap();
            assert!(report.ok(), "conv2d dil={dil}: {report:?}");
        }
    }
}

#[test]
fn gradcheck_conv2d_strided() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x = randu(&mut rng, 1 * 2 * 6 * 6);
    let w = randu(&mut rng, 3 * 2 * 3 * 3);
    let report = check_gradients(
        |t| Ok(sum(&conv2d(&t[0], &t[1], 2, 1, 1)?)),
        &[(vec![1, 2, 6, 6], x), (vec![3, 2, 3, 3], w)],
    )
    .unwrap();
    assert!(report.ok(), "{report:?}");
}

#[test]
fn gradcheck_batchnorm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for mode in [BnMode::Train, BnMode::Eval] {
        let x = randu(&mut rng, 3 * 2 * 2 * 2);
        let g = randu(&mut rng, 2);
        let b = randu(&mut rng, 2);
        let report = check_gradients(
            |t| {
                let (rm, rv) = bn_buffers(2);
                let y = batchnorm2d(&t[0], &t[1], &t[2], &rm, &rv, mode, 0.1, 1e-5)?;
                // weighted sum so slice gradients are non-uniform
                let wts = Tensor::new(
                    &[3, 2, 2, 2],
                    (0..24).map(|i| (i as f64) * 0.13 - 1.0).collect(),
                )?;
                Ok(sum(&mul(&y, &wts)?))
            },
            &[
                (vec![3, 2, 2, 2], x),
                (vec![2], g),
                (vec![2], b),
            ],
        )
        .unwrap();
        assert!(report.ok(), "batchnorm {mode:?}: {report:?}");
    }
}

#[test]
fn gradcheck_misc_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    // linear with bias
    let report = check_gradients(
        |t| Ok(sum(&linear(&t[0], &t[1], Some(&t[2]))?)),
        &[
            (vec![2, 3], randu(&mut rng, 6)),
            (vec![3, 2], randu(&mut rng, 6)),
            (vec![2], randu(&mut rng, 2)),
        ],
    )
    .unwrap();
    assert!(report.ok(), "linear: {report:?}");

    // softmax with non-uniform downstream weights
    let report = check_gradients(
        |t| {
            let y = softmax(&t[0], 1)?;
            let wts = Tensor::new(&[2, 4], (0..8).map(|i| i as f64 * 0.31 - 1.0).collect())?;
            Ok(sum(&mul(&y, &wts)?))
        },
        &[(vec![2, 4], randu(&mut rng, 8))],
    )
    .unwrap();
    assert!(report.ok(), "softmax: {report:?}");

    // pooling
    let report = check_gradients(
        |t| Ok(sum(&mul(&global_avg_pool(&t[0])?, &Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 3.0])?)?)),
        &[(vec![2, 2, 3, 3], randu(&mut rng, 36))],
    )
    .unwrap();
    assert!(report.ok(), "global_avg_pool: {report:?}");

    let report = check_gradients(
        |t| Ok(sum(&adaptive_avg_pool(&t[0], 2, 2)?)),
        &[(vec![1, 2, 5, 6], randu(&mut rng, 60))],
    )
    .unwrap();
    assert!(report.ok(), "adaptive_avg_pool: {report:?}");

    // l2_normalize
    let report = check_gradients(
        |t| {
            let y = l2_normalize(&t[0], 1)?;
            let wts = Tensor::new(&[2, 3], (0..6).map(|i| i as f64 * 0.7 - 2.0).collect())?;
            Ok(sum(&mul(&y, &wts)?))
        },
        &[(vec![2, 3], randu(&mut rng, 6))],
    )
    .unwrap();
    assert!(report.ok(), "l2_normalize: {report:?}");

    // euclidean distance
    let report = check_gradients(
        |t| euclidean_distance(&t[0], &t[1]),
        &[(vec![4], randu(&mut rng, 4)), (vec![4], randu(&mut rng, 4))],
    )
    .unwrap();
    assert!(report.ok(), "euclidean_distance: {report:?}");

    // bmm + transpose
    let report = check_gradients(
        |t| Ok(sum(&bmm(&t[0], &transpose12(&t[1])?)?)),
        &[
            (vec![2, 2, 3], randu(&mut rng, 12)),
            (vec![2, 2, 3], randu(&mut rng, 12)),
        ],
    )
    .unwrap();
    assert!(report.ok(), "bmm: {report:?}");

    // concat + select
    let report = check_gradients(
        |t| {
            let c = concat(&[t[0].clone(), t[1].clone()], 0)?;
            Ok(sum(&select_rows(&c, &[0, 2, 2, 3])?))
        },
        &[
            (vec![2, 3], randu(&mut rng, 6)),
            (vec![2, 3], randu(&mut rng, 6)),
        ],
    )
    .unwrap();
    assert!(report.ok(), "concat/select_rows: {report:?}");

    // cross entropy
    let report = check_gradients(
        |t| cross_entropy(&t[0], &[1, 0, 2]),
        &[(vec![3, 4], randu(&mut rng, 12))],
    )
    .unwrap();
    assert!(report.ok(), "cross_entropy: {report:?}");
}

// ---------------------------------------------------------------------------
// property tests
// ---------------------------------------------------------------------------

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let y = softmax(&Tensor::new(&[3, 4], vals).unwrap(), 1).unwrap();
        for s in 0..3 {
            let total: f64 = y.values()[s * 4..(s + 1) * 4].iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(y.values()[s * 4..(s + 1) * 4].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn distance_is_symmetric_and_nonnegative(
        a in proptest::collection::vec(-10.0f64..10.0, 5),
        b in proptest::collection::vec(-10.0f64..10.0, 5),
    ) {
        let u = Tensor::new(&[5], a).unwrap();
        let v = Tensor::new(&[5], b).unwrap();
        let duv = euclidean_distance(&u, &v).unwrap().item();
        let dvu = euclidean_distance(&v, &u).unwrap().item();
        prop_assert!(duv >= 0.0);
        prop_assert!((duv - dvu).abs() < 1e-12);
    }
}
