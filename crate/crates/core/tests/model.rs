use proptest::prelude::*;
use vitlr_core::model::{Init, ModelConfig, ViTLR};
use vitlr_core::ops::{self, NormMode};
use vitlr_core::rng::SplitMix64;
use vitlr_core::{Tape, Tensor};

fn frames(cfg: &ModelConfig, batch: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = SplitMix64::new(seed);
    (0..cfg.n)
        .map(|_| Tensor::uniform(&[batch, cfg.c, cfg.h, cfg.w], 1.0, &mut rng))
        .collect()
}

fn small() -> ModelConfig {
    ModelConfig {
        n: 2,
        h: 32,
        w: 32,
        m: 4,
        grid_h: 2,
        grid_w: 2,
        widths: [4, 6, 8],
        query_dim: 8,
        encoder_depth: 1,
        decoder_depth: 1,
        ..ModelConfig::default()
    }
}

#[test]
fn backbone_streams_have_expected_shape() {
    let model = ViTLR::new(ModelConfig::default(), 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 3, 128, 256]));
    let mut g = model.graph(&mut tape, NormMode::Eval);
    let f = g.backbone_forward(x).unwrap();
    assert_eq!(tape.value(f.regression).shape(), &[2, 48, 16, 32]);
    assert_eq!(tape.value(f.classification).shape(), &[2, 48, 16, 32]);
}

#[test]
fn backbone_of_zero_frame_is_zero() {
    let model = ViTLR::new(small(), 2).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 3, 32, 32]));
    let mut g = model.graph(&mut tape, NormMode::Eval);
    let f = g.backbone_forward(x).unwrap();
    assert!(tape.value(f.regression).data().iter().all(|&v| v == 0.0));
    assert!(tape
        .value(f.classification)
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn backbone_rejects_wrong_extent() {
    let model = ViTLR::new(small(), 2).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 3, 32, 40]));
    let mut g = model.graph(&mut tape, NormMode::Eval);
    assert!(g.backbone_forward(x).is_err());
}

#[test]
fn forward_is_bit_deterministic() {
    let cfg = small();
    let model = ViTLR::with_init(cfg.clone(), 3, Init::Random).unwrap();
    let clip = frames(&cfg, 2, 4);
    assert_eq!(model.predict(&clip).unwrap(), model.predict(&clip).unwrap());
    let again = ViTLR::with_init(cfg, 3, Init::Random).unwrap();
    assert_eq!(model.predict(&clip).unwrap(), again.predict(&clip).unwrap());
}

#[test]
fn projection_token_shape_and_composition() {
    let cfg = ModelConfig::default();
    let model = ViTLR::with_init(cfg.clone(), 5, Init::Random).unwrap();
    let mut rng = SplitMix64::new(6);
    let x = Tensor::uniform(&[1, 96, 16, 32], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let tokens = model
        .graph(&mut tape, NormMode::Eval)
        .conv_projection(xv)
        .unwrap();
    assert_eq!(tape.value(tokens).shape(), &[1, 96, 512]);

    let p = model.params();
    let get = |n: &str| p.get(n).unwrap();
    let dw = ops::conv2d(&x, get("proj.dw.weight"), get("proj.dw.bias"), 1, 1, 96).unwrap();
    let (bn, _, _) = ops::batchnorm2d(
        &dw,
        get("proj.bn.gamma"),
        get("proj.bn.beta"),
        get("proj.bn.running_mean"),
        get("proj.bn.running_var"),
        vitlr_core::model::BN_EPS,
        NormMode::Eval,
    )
    .unwrap();
    let pw = ops::conv2d(&bn, get("proj.pw.weight"), get("proj.pw.bias"), 1, 0, 1).unwrap();
    let expected = pw.reshape(&[1, 96, 512]).unwrap();
    assert_eq!(tape.value(tokens).max_abs_diff(&expected), 0.0);
}

#[test]
fn projection_with_identity_weights_passes_input_through() {
    let cfg = small();
    let mut model = ViTLR::new(cfg.clone(), 7).unwrap();
    let c = cfg.frame_channels();
    let s = cfg.s;
    let mut dw = Tensor::zeros(&[c, 1, s, s]);
    let mut pw = Tensor::zeros(&[c, c, 1, 1]);
    for ch in 0..c {
        dw.data_mut()[ch * s * s + s * s / 2] = 1.0;
        pw.data_mut()[ch * c + ch] = 1.0;
    }
    let p = model.params_mut();
    *p.get_mut("proj.dw.weight").unwrap() = dw;
    *p.get_mut("proj.pw.weight").unwrap() = pw;
    // Unit running variance with the epsilon folded out gives an exact identity.
    *p.get_mut("proj.bn.running_var").unwrap() =
        Tensor::full(&[c], 1.0 - vitlr_core::model::BN_EPS);

    let mut rng = SplitMix64::new(8);
    let x = Tensor::uniform(&[2, c, 4, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let tokens = model
        .graph(&mut tape, NormMode::Eval)
        .conv_projection(xv)
        .unwrap();
    let expected = x.reshape(&[2, c, 16]).unwrap();
    assert!(tape.value(tokens).max_abs_diff(&expected) < 1e-6);
}

#[test]
fn fresh_encoder_is_identity_and_preserves_shape() {
    let cfg = ModelConfig::default();
    let model = ViTLR::new(cfg.clone(), 9).unwrap();
    let ce = cfg.fused_channels();
    let mut rng = SplitMix64::new(10);
    let x = Tensor::uniform(&[1, ce, 16, 32], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = model
        .graph(&mut tape, NormMode::Eval)
        .encoder_forward(xv)
        .unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn encoder_rejects_channel_mismatch() {
    let model = ViTLR::new(small(), 9).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::zeros(&[1, 5, 4, 4]));
    assert!(model
        .graph(&mut tape, NormMode::Eval)
        .encoder_forward(xv)
        .is_err());
}

#[test]
fn encoder_depthwise_weights_receive_gradient() {
    let cfg = small();
    let model = ViTLR::with_init(cfg.clone(), 11, Init::Random).unwrap();
    let mut rng = SplitMix64::new(12);
    let x = Tensor::uniform(&[1, cfg.fused_channels(), 4, 4], 1.0, &mut rng);
    let r = Tensor::uniform(x.shape(), 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let y = model
        .graph(&mut tape, NormMode::Eval)
        .encoder_forward(xv)
        .unwrap();
    let value = tape
        .value(y)
        .data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| a * b)
        .sum();
    let loss = tape.scalar_fn(y, value, r).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = &grads.params()["encoder.0.dw.weight"];
    assert_eq!(g.shape(), &[cfg.fused_channels(), 1, 7, 7]);
    assert!(g.data().iter().any(|&v| v.abs() > 1e-6));
}

#[test]
fn decoder_ignores_image_when_cross_path_is_zero() {
    let cfg = ModelConfig::default();
    let model = ViTLR::new(cfg.clone(), 13).unwrap();
    let mut rng = SplitMix64::new(14);
    let mut outs = Vec::new();
    for _ in 0..2 {
        let enc = Tensor::uniform(&[1, cfg.fused_channels(), 16, 32], 3.0, &mut rng);
        let mut tape = Tape::new();
        let ev = tape.leaf(enc);
        let q = model
            .graph(&mut tape, NormMode::Eval)
            .decoder_forward(ev)
            .unwrap();
        assert_eq!(tape.value(q).shape(), &[1, 64, 4, 4]);
        outs.push(tape.value(q).clone());
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn decoder_reacts_to_single_encoded_location() {
    let cfg = small();
    let model = ViTLR::with_init(cfg.clone(), 15, Init::Random).unwrap();
    let mut rng = SplitMix64::new(16);
    let enc = Tensor::uniform(&[1, cfg.fused_channels(), 4, 4], 1.0, &mut rng);
    let run = |e: Tensor| {
        let mut tape = Tape::new();
        let ev = tape.leaf(e);
        let q = model
            .graph(&mut tape, NormMode::Eval)
            .decoder_forward(ev)
            .unwrap();
        tape.value(q).clone()
    };
    let base = run(enc.clone());
    let mut probe = enc;
    probe.data_mut()[5] += 1.0;
    assert!(run(probe).max_abs_diff(&base) > 1e-6);
}

#[test]
fn heads_with_zero_weights_are_centered_and_uniform() {
    let cfg = ModelConfig::default();
    let mut model = ViTLR::new(cfg.clone(), 17).unwrap();
    for name in ["head.box.weight", "head.cls.weight"] {
        let t = model.params_mut().get_mut(name).unwrap();
        t.data_mut().fill(0.0);
    }
    let pred = model.predict(&frames(&cfg, 1, 18)).unwrap().remove(0);
    for q in 0..cfg.m {
        assert_eq!(pred.centers[q], [128.0, 64.0]);
        assert_eq!((pred.widths[q], pred.heights[q]), (128.0, 64.0));
        for &p in &pred.scores[q] {
            assert!((p - 0.2).abs() < 1e-6);
        }
    }
}

#[test]
fn default_prediction_shapes() {
    let cfg = ModelConfig::default();
    let model = ViTLR::new(cfg.clone(), 19).unwrap();
    let pred = model.predict(&frames(&cfg, 1, 20)).unwrap().remove(0);
    assert_eq!(pred.centers.len(), 16);
    assert_eq!(pred.heights.len(), 16);
    assert_eq!(pred.widths.len(), 16);
    assert!(pred.scores.iter().all(|r| r.len() == 5));
    pred.check(cfg.w, cfg.h).unwrap();
}

#[test]
fn single_frame_model_and_duplicated_frames_are_valid() {
    let one = ModelConfig { n: 1, ..small() };
    let model = ViTLR::with_init(one.clone(), 21, Init::Random).unwrap();
    let clip = frames(&one, 1, 22);
    model.predict(&clip).unwrap()[0]
        .check(one.w, one.h)
        .unwrap();

    let three = ModelConfig { n: 3, ..small() };
    let model = ViTLR::with_init(three.clone(), 21, Init::Random).unwrap();
    let dup = vec![clip[0].clone(); 3];
    model.predict(&dup).unwrap()[0]
        .check(three.w, three.h)
        .unwrap();
}

#[test]
fn wrong_frame_count_names_both_counts() {
    let cfg = small();
    let model = ViTLR::new(cfg.clone(), 23).unwrap();
    let err = model
        .predict(&frames(&cfg, 1, 24)[..1])
        .unwrap_err()
        .to_string();
    assert!(err.contains("expected 2 frames, got 1"), "{err}");
}

#[test]
fn every_frame_influences_the_output() {
    let cfg = ModelConfig { n: 3, ..small() };
    let model = ViTLR::with_init(cfg.clone(), 25, Init::Random).unwrap();
    let clip = frames(&cfg, 1, 26);
    let base = model.predict(&clip).unwrap();
    for k in 0..cfg.n {
        let mut probe = clip.clone();
        for v in probe[k].data_mut() {
            *v += 0.5;
        }
        let out = model.predict(&probe).unwrap();
        assert_ne!(out, base, "frame {k} has no effect");
    }
}

#[test]
fn parameter_shapes_depend_only_on_config() {
    let a = ViTLR::new(ModelConfig::default(), 1).unwrap();
    let b = ViTLR::new(ModelConfig::default(), 2).unwrap();
    let shapes = |m: &ViTLR| -> Vec<(String, Vec<usize>)> {
        m.params()
            .iter()
            .map(|(k, t)| (k.clone(), t.shape().to_vec()))
            .collect()
    };
    assert_eq!(shapes(&a), shapes(&b));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn predictions_satisfy_invariants_for_random_parameters(seed in any::<u64>(), scale in 0.1f32..20.0) {
        let cfg = small();
        let mut model = ViTLR::with_init(cfg.clone(), seed, Init::Random).unwrap();
        let names: Vec<String> = model.params().iter().map(|(k, _)| k.clone()).collect();
        for name in names {
            if name.ends_with("running_var") {
                continue;
            }
            for v in model.params_mut().get_mut(&name).unwrap().data_mut() {
                *v *= scale;
            }
        }
        let out = model.predict(&frames(&cfg, 1, seed ^ 1)).unwrap();
        prop_assert!(out[0].check(cfg.w, cfg.h).is_ok(), "{:?}", out[0].check(cfg.w, cfg.h));
    }
}

/// Random scalar loss through the whole model, analytic versus central
/// differences on a sample of parameter entries.
#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        n: 2,
        h: 32,
        w: 32,
        m: 4,
        grid_h: 2,
        grid_w: 2,
        widths: [4, 6, 8],
        query_dim: 8,
        encoder_depth: 1,
        decoder_depth: 1,
        ..ModelConfig::default()
    };
    let model = ViTLR::with_init(cfg.clone(), 27, Init::Random).unwrap();
    let clip = frames(&cfg, 2, 28);
    let mut rng = SplitMix64::new(29);
    let rb = Tensor::uniform(&[2 * cfg.m, 4], 0.05, &mut rng);
    let rp = Tensor::uniform(&[2 * cfg.m, cfg.l + 1], 1.0, &mut rng);

    let objective = |m: &ViTLR| -> f64 {
        let mut tape = Tape::new();
        let (out, _) = m.forward(&mut tape, &clip, NormMode::Train).unwrap();
        let dot = |v: &Tensor, r: &Tensor| -> f64 {
            v.data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum()
        };
        dot(tape.value(out.boxes), &rb) + dot(tape.value(out.probs), &rp)
    };

    let mut tape = Tape::new();
    let (out, _) = model.forward(&mut tape, &clip, NormMode::Train).unwrap();
    let vb = tape.scalar_fn(out.boxes, 0.0, rb.clone()).unwrap();
    let vp = tape.scalar_fn(out.probs, 0.0, rp.clone()).unwrap();
    let loss = tape.add(vb, vp).unwrap();
    let grads = tape.backward(loss).unwrap();

    let names: Vec<String> = model.params().trainable().map(|(k, _)| k.clone()).collect();
    let (mut diff2, mut a2, mut f2) = (0.0f64, 0.0f64, 0.0f64);
    let h = 1e-3f32;
    for name in &names {
        let numel = model.params().get(name).unwrap().numel();
        for _ in 0..3 {
            let j = rng.below(numel);
            let mut plus = model.clone();
            plus.params_mut().get_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = model.clone();
            minus.params_mut().get_mut(name).unwrap().data_mut()[j] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
            let a = grads.params()[name].data()[j] as f64;
            diff2 += (a - fd).powi(2);
            a2 += a * a;
            f2 += fd * fd;
        }
    }
    let rel = diff2.sqrt() / a2.sqrt().max(f2.sqrt()).max(1e-8);
    assert!(rel < 1e-2, "relative error {rel:.3e}");
}

#[test]
fn fresh_model_boxes_tile_the_query_grid() {
    let cfg = ModelConfig {
        m: 6,
        grid_h: 2,
        grid_w: 3,
        h: 32,
        w: 48,
        ..small()
    };
    let model = ViTLR::new(cfg.clone(), 11).unwrap();
    let pred = model.predict(&frames(&cfg, 1, 2)).unwrap().remove(0);
    for gy in 0..2 {
        for gx in 0..3 {
            let b = pred.bbox(gy * 3 + gx);
            let (cx, cy) = ((gx as f32 + 0.5) * 16.0, (gy as f32 + 0.5) * 16.0);
            assert!(
                (b.cx - cx).abs() < 1e-3 && (b.cy - cy).abs() < 1e-3,
                "query ({gy},{gx}): {b:?}"
            );
        }
    }
}
