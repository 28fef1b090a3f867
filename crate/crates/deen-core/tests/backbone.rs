//! Backbone tests: aggregation-block identity at init, attention row sums,
//! expansion arithmetic, two-stream behavior, and gradient coverage.

use deen_core::backbone::dee::{dee_expand_batch, dee_forward, DeeBranch, DeeWeights};
use deen_core::backbone::mfa::{mfa_forward, MfaWeights};
use deen_core::backbone::{Mode, Model, ModelConfig};
use deen_core::data::Modality;
use deen_core::losses::total_loss;
use deen_core::tensor::gradcheck::check_gradients;
use deen_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::leaf(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        stage_channels: vec![4, 4, 4, 8, 8],
        input_hw: (16, 16),
        num_identities: 2,
        dee_stage: Some(3),
        dee_branches: 2,
        mfa_stages: vec![1],
        drop_stage4: false,
        // ratio 4 would give C' = 1 at stage 1, a degenerate 1x1 channel
        // softmax whose queries get no gradient
        reduction_ratio: 2,
    }
}

fn batch(n: usize, hw: (usize, usize), seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randn(&[n, 3, hw.0, hw.1], &mut rng)
}

// ------------------------------------------------------------------- MFA

fn mfa_weights(c_l: usize, c_h: usize, cp: usize, rng: &mut ChaCha8Rng, zero_omega: bool) -> MfaWeights {
    let omega = |rng: &mut ChaCha8Rng| {
        if zero_omega {
            Tensor::leaf(&[c_h, cp, 1, 1], vec![0.0; c_h * cp]).unwrap()
        } else {
            randn(&[c_h, cp, 1, 1], rng)
        }
    };
    MfaWeights {
        psi1_q: randn(&[cp, c_h, 1, 1], rng),
        psi1_k: randn(&[cp, c_l, 1, 1], rng),
        psi1_v: randn(&[cp, c_l, 1, 1], rng),
        omega_c: omega(rng),
        psi2_q: randn(&[cp, c_h, 1, 1], rng),
        psi2_k: randn(&[cp, c_l, 1, 1], rng),
        psi2_v: randn(&[cp, c_l, 1, 1], rng),
        omega_s: omega(rng),
    }
}

#[test]
fn mfa_with_zero_projections_is_bit_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f_l = randn(&[2, 3, 8, 6], &mut rng);
    let f_h = randn(&[2, 5, 4, 3], &mut rng);
    let w = mfa_weights(3, 5, 2, &mut rng, true);
    let out = mfa_forward(&f_l, &f_h, &w).unwrap();
    assert_eq!(out.output.shape(), f_h.shape());
    for (a, b) in out.output.values().iter().zip(f_h.values()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn mfa_attention_rows_are_probability_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f_l = randn(&[2, 3, 8, 6], &mut rng);
    let f_h = randn(&[2, 5, 4, 3], &mut rng);
    let w = mfa_weights(3, 5, 2, &mut rng, false);
    let out = mfa_forward(&f_l, &f_h, &w).unwrap();
    for (m, rows, cols) in [
        (&out.m_channel, 2 * 2, 2),  // N * C' rows of length C'
        (&out.m_spatial, 2 * 12, 12), // N * S rows of length S
    ] {
        let v = m.values();
        assert_eq!(v.len(), rows * cols);
        for r in 0..rows {
            let s: f64 = v[r * cols..(r + 1) * cols].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
            assert!(v[r * cols..(r + 1) * cols].iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn mfa_rejects_low_level_smaller_than_high_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f_l = randn(&[1, 3, 2, 2], &mut rng);
    let f_h = randn(&[1, 5, 4, 4], &mut rng);
    let w = mfa_weights(3, 5, 2, &mut rng, false);
    assert!(mfa_forward(&f_l, &f_h, &w).is_err());
}

#[test]
fn mfa_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = mfa_weights(2, 2, 1, &mut rng, false);
    let f_l_vals: Vec<f64> = (0..2 * 2 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f_h_vals: Vec<f64> = (0..2 * 2 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = check_gradients(
        |leaves| {
            let out = mfa_forward(&leaves[0], &leaves[1], &w)?;
            Ok(deen_core::tensor::sum(&out.output))
        },
        &[
            (vec![1, 2, 2, 2], f_l_vals),
            (vec![1, 2, 2, 2], f_h_vals),
        ],
    )
    .unwrap();
    assert!(report.ok(), "{report:?}");
}

// ------------------------------------------------------------------- DEE

fn dee_weights(c: usize, b: usize, rng: &mut ChaCha8Rng) -> DeeWeights {
    DeeWeights {
        branches: (0..b)
            .map(|_| DeeBranch {
                phi: [
                    randn(&[c / 4, c, 3, 3], rng),
                    randn(&[c / 4, c, 3, 3], rng),
                    randn(&[c / 4, c, 3, 3], rng),
                ],
                theta: randn(&[c, c / 4, 1, 1], rng),
            })
            .collect(),
    }
}

#[test]
fn dee_outputs_match_input_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = randn(&[2, 8, 5, 4], &mut rng);
    let w = dee_weights(8, 3, &mut rng);
    let outs = dee_forward(&f, &w).unwrap();
    assert_eq!(outs.len(), 3);
    for o in &outs {
        assert_eq!(o.shape(), f.shape());
    }
}

#[test]
fn dee_rejects_channels_not_divisible_by_four() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f = randn(&[1, 6, 4, 4], &mut rng);
    // weights sized for 8 channels; the channel check fires first
    let w = dee_weights(8, 1, &mut rng);
    assert!(dee_forward(&f, &w).is_err());
}

#[test]
fn dee_composition_matches_hand_computation_on_1x1_input() {
    // on a 1x1 spatial map with padding == dilation, only the center tap of
    // each 3x3 kernel sees the input, so the branch reduces to
    // theta * relu(mean_d center(phi_d) * x) computable by hand
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = 4;
    let x: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = Tensor::leaf(&[1, c, 1, 1], x.clone()).unwrap();
    let w = dee_weights(c, 2, &mut rng);
    let outs = dee_forward(&f, &w).unwrap();
    for (branch, out) in w.branches.iter().zip(&outs) {
        let mut hidden = vec![0.0; c / 4];
        for (oc, h) in hidden.iter_mut().enumerate() {
            for phi in &branch.phi {
                for (ic, &xv) in x.iter().enumerate() {
                    // center tap of the 3x3 kernel for output channel oc
                    *h += phi.values()[oc * c * 9 + ic * 9 + 4] * xv;
                }
            }
            *h = (*h / 3.0).max(0.0);
        }
        for oc in 0..c {
            let mut want = 0.0;
            for (ic, h) in hidden.iter().enumerate() {
                want += branch.theta.values()[oc * (c / 4) + ic] * h;
            }
            let got = out.values()[oc];
            assert!((got - want).abs() < 1e-12, "channel {oc}: {got} vs {want}");
        }
    }
}

#[test]
fn expansion_arithmetic_replicates_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f = randn(&[2, 8, 3, 3], &mut rng);
    let w = dee_weights(8, 3, &mut rng);
    let labels = [4, 9];
    let mods = [Modality::Vis, Modality::Ir];
    let (expanded, out_labels, out_mods, tags) =
        dee_expand_batch(&f, &labels, &mods, &w).unwrap();
    assert_eq!(expanded.shape(), &[8, 8, 3, 3]);
    assert_eq!(out_labels, vec![4, 9, 4, 9, 4, 9, 4, 9]);
    assert_eq!(tags, vec![0, 0, 1, 1, 2, 2, 3, 3]);
    assert_eq!(
        out_mods,
        vec![
            Modality::Vis, Modality::Ir, Modality::Vis, Modality::Ir,
            Modality::Vis, Modality::Ir, Modality::Vis, Modality::Ir,
        ]
    );
    // rows 0..N of the expanded batch are the original feature map
    let n_orig: usize = 2 * 8 * 3 * 3;
    assert_eq!(&expanded.values()[..n_orig], f.values());
}

// ------------------------------------------------------------------ model

#[test]
fn train_forward_expands_and_eval_does_not() {
    let model = Model::new(small_config(), 11).unwrap();
    let vis = batch(2, (16, 16), 20);
    let ir = batch(2, (16, 16), 21);
    let (train_out, _) = model
        .forward(&vis, &ir, &[0, 1], &[0, 1], Mode::Train)
        .unwrap();
    // 4 originals x (1 + 2 branches)
    assert_eq!(train_out.pooled_pre_bn.shape(), &[12, 8]);
    assert_eq!(train_out.logits.shape(), &[12, 2]);
    assert_eq!(train_out.branch_of_sample.iter().filter(|&&t| t == 0).count(), 4);
    let (eval_out, _) = model
        .forward(&vis, &ir, &[0, 1], &[0, 1], Mode::Eval)
        .unwrap();
    assert_eq!(eval_out.pooled_pre_bn.shape(), &[4, 8]);
    assert!(eval_out.branch_of_sample.iter().all(|&t| t == 0));
}

#[test]
fn identical_streams_give_identical_features_in_eval() {
    let model = Model::new(small_config(), 12).unwrap();
    // make the IR stem a copy of the VIS stem
    for suffix in [
        "b0.conv", "b0.bn.gamma", "b0.bn.beta", "b0.bn.running_mean", "b0.bn.running_var",
        "b1.conv", "b1.bn.gamma", "b1.bn.beta", "b1.bn.running_mean", "b1.bn.running_var",
    ] {
        let src = model
            .store
            .get(&format!("stage0.vis.{suffix}"))
            .unwrap()
            .data
            .borrow()
            .clone();
        *model
            .store
            .get(&format!("stage0.ir.{suffix}"))
            .unwrap()
            .data
            .borrow_mut() = src;
    }
    let imgs = batch(2, (16, 16), 30);
    let (out, _) = model
        .forward(&imgs, &imgs, &[0, 1], &[0, 1], Mode::Eval)
        .unwrap();
    let v = out.pooled_post_bn.values();
    let d = out.pooled_post_bn.shape()[1];
    for i in 0..2 {
        for k in 0..d {
            assert_eq!(
                v[i * d + k].to_bits(),
                v[(2 + i) * d + k].to_bits(),
                "sample {i} dim {k}"
            );
        }
    }
}

#[test]
fn streams_with_distinct_stems_differ() {
    let model = Model::new(small_config(), 13).unwrap();
    let imgs = batch(2, (16, 16), 31);
    let (out, _) = model
        .forward(&imgs, &imgs, &[0, 1], &[0, 1], Mode::Eval)
        .unwrap();
    let v = out.pooled_post_bn.values();
    let d = out.pooled_post_bn.shape()[1];
    let diff: f64 = (0..d).map(|k| (v[k] - v[2 * d + k]).abs()).sum();
    assert!(diff > 1e-6, "independent stems produced equal features");
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    let model = Model::new(small_config(), 14).unwrap();
    // the aggregation projections are zero at init by design; randomize them
    // so this probability-1 check applies to every parameter
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for name in ["mfa1.omega_c", "mfa1.omega_s"] {
        let e = model.store.get(name).unwrap();
        let n: usize = e.shape.iter().product();
        *e.data.borrow_mut() = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    }
    let vis = batch(4, (16, 16), 40);
    let ir = batch(4, (16, 16), 41);
    let (bundle, bound) = model
        .forward(&vis, &ir, &[0, 0, 1, 1], &[0, 0, 1, 1], Mode::Train)
        .unwrap();
    let (loss, _) = total_loss(&bundle, &Default::default()).unwrap();
    loss.backward().unwrap();

    let mut grad_mag: std::collections::BTreeMap<usize, f64> = Default::default();
    for (idx, t) in &bound.bound {
        let g = t.grad().expect("bound parameter missing gradient");
        *grad_mag.entry(*idx).or_default() += g.iter().map(|x| x.abs()).sum::<f64>();
    }
    for (i, e) in model.store.entries().iter().enumerate() {
        if !e.trainable {
            continue;
        }
        let mag = grad_mag.get(&i).copied().unwrap_or(-1.0);
        assert!(mag >= 0.0, "parameter {} never bound in forward", e.name);
        assert!(mag > 0.0, "parameter {} has identically zero gradient", e.name);
    }
}

#[test]
fn drop_stage4_changes_embedding_dim() {
    let mut cfg = small_config();
    assert_eq!(cfg.embedding_dim(), 8);
    cfg.drop_stage4 = true;
    cfg.input_hw = (8, 8);
    assert_eq!(cfg.embedding_dim(), 8);
    cfg.stage_channels = vec![4, 4, 4, 12, 8];
    assert_eq!(cfg.embedding_dim(), 12);
    cfg.dee_stage = Some(3);
    let model = Model::new(cfg, 15).unwrap();
    let vis = batch(2, (8, 8), 50);
    let ir = batch(2, (8, 8), 51);
    let (out, _) = model
        .forward(&vis, &ir, &[0, 1], &[0, 1], Mode::Eval)
        .unwrap();
    assert_eq!(out.pooled_pre_bn.shape(), &[4, 12]);
}

#[test]
fn config_validation_rejects_bad_geometry() {
    let mut cfg = small_config();
    cfg.input_hw = (8, 8); // 4 halvings need >= 16
    assert!(Model::new(cfg, 0).is_err());
    let mut cfg = small_config();
    cfg.dee_stage = Some(2); // channels[2] = 4, divisible; stage in range -> ok
    assert!(Model::new(cfg, 0).is_ok());
    let mut cfg = small_config();
    cfg.stage_channels = vec![4, 4, 4, 6, 8];
    cfg.dee_stage = Some(3); // 6 not divisible by 4
    assert!(Model::new(cfg, 0).is_err());
    let mut cfg = small_config();
    cfg.mfa_stages = vec![5];
    assert!(Model::new(cfg, 0).is_err());
}

#[test]
fn same_seed_same_model_same_forward() {
    let a = Model::new(small_config(), 77).unwrap();
    let b = Model::new(small_config(), 77).unwrap();
    for (ea, eb) in a.store.entries().iter().zip(b.store.entries()) {
        assert_eq!(ea.name, eb.name);
        for (x, y) in ea.data.borrow().iter().zip(eb.data.borrow().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    let vis = batch(2, (16, 16), 60);
    let ir = batch(2, (16, 16), 61);
    let (oa, _) = a.forward(&vis, &ir, &[0, 1], &[0, 1], Mode::Eval).unwrap();
    let (ob, _) = b.forward(&vis, &ir, &[0, 1], &[0, 1], Mode::Eval).unwrap();
    for (x, y) in oa.logits.values().iter().zip(ob.logits.values()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn embed_matches_eval_forward() {
    let model = Model::new(small_config(), 16).unwrap();
    let vis = batch(2, (16, 16), 70);
    let ir = batch(2, (16, 16), 71);
    let (out, _) = model
        .forward(&vis, &ir, &[0, 1], &[0, 1], Mode::Eval)
        .unwrap();
    let ev = model.embed(&vis, Modality::Vis).unwrap();
    let ei = model.embed(&ir, Modality::Ir).unwrap();
    let d = ev.shape()[1];
    let full = out.pooled_post_bn.values();
    for (row, v) in ev.values().chunks(d).chain(ei.values().chunks(d)).enumerate() {
        for (k, x) in v.iter().enumerate() {
            assert_eq!(x.to_bits(), full[row * d + k].to_bits(), "row {row} dim {k}");
        }
    }
}
