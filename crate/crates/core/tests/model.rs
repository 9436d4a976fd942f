use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinlite::grad::{Tape, DEFAULT_FD_STEP};
use twinlite::loss::{one_hot, LossConfig};
use twinlite::nn::{
    esp_schema, gradcheck_model, EspConfig, Graph, HeadMode, HeadOutputs, Model, ModelConfig, Mode, Targets, Weights,
};
use twinlite::tensor::{self, BnMode, ConvParams};
use twinlite::Tensor;

fn random<T: twinlite::Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(0.0..1.0)))
}

fn shapes(out: &HeadOutputs<Tensor<f32>>) -> Vec<Vec<usize>> {
    match out {
        HeadOutputs::Two { da, lane } => vec![da.shape().to_vec(), lane.shape().to_vec()],
        HeadOutputs::Single(x) => vec![x.shape().to_vec()],
    }
}

#[test]
fn parameter_counts_of_ablation_rows() {
    let full = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
    let baseline = Model::<f32>::new(ModelConfig::baseline(), 0).unwrap();
    let attention_only = Model::<f32>::new(
        ModelConfig {
            head_mode: HeadMode::SingleHead,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap();
    assert_eq!(baseline.param_count(), 417_021);
    assert_eq!(attention_only.param_count(), 436_967);
    assert_eq!(full.param_count(), 439_632);
    let fused = Model::<f32>::new(ModelConfig { fused: true, ..ModelConfig::default() }, 0).unwrap();
    assert_eq!(fused.param_count(), 439_632 - 160);
}

#[test]
fn encoder_output_is_one_eighth() {
    let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    for (h, w) in [(360, 640), (64, 64), (16, 24)] {
        let mut tape = Tape::inference();
        let x = tape.leaf(random(&[1, 3, h, w], 2));
        let mut g = Graph::new(&mut tape, model.weights(), BnMode::Inference, 1e-3, false);
        let a = g.encoder(x, model.config()).unwrap();
        assert_eq!(tape.shape(a), &[1, 32, h / 8, w / 8]);
    }
}

#[test]
fn input_not_divisible_by_eight_is_rejected_with_guidance() {
    let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    let err = model.infer(&Tensor::zeros(&[1, 3, 50, 50])).unwrap_err().to_string();
    assert!(err.contains("48x48"), "{err}");
}

#[test]
fn head_shapes_for_each_mode() {
    let x = random::<f32>(&[1, 3, 64, 64], 3);
    let mut full = Model::<f32>::new(ModelConfig::default(), 4).unwrap();
    full.set_mode(Mode::Eval);
    assert_eq!(shapes(&full.infer(&x).unwrap()), vec![vec![1, 2, 64, 64]; 2]);
    let base = Model::<f32>::new(ModelConfig::baseline(), 4).unwrap();
    assert_eq!(shapes(&base.infer(&x).unwrap()), vec![vec![1, 3, 64, 64]]);
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let model = Model::<f32>::new(ModelConfig::default(), 5).unwrap();
    let x = random::<f32>(&[2, 3, 32, 32], 6);
    assert_eq!(model.infer(&x).unwrap(), model.infer(&x).unwrap());
}

#[test]
fn heads_share_encoder_weights() {
    let two = Model::<f32>::new(ModelConfig::default(), 7).unwrap();
    let single = Model::<f32>::new(ModelConfig { head_mode: HeadMode::SingleHead, ..ModelConfig::default() }, 7).unwrap();
    for (name, t) in &two.weights().params {
        if name.starts_with("encoder.") || name.starts_with("attention.") {
            assert_eq!(single.weights().params[name].shape(), t.shape(), "{name}");
        }
    }
}

#[test]
fn attention_is_identity_at_init_and_rows_sum_to_one() {
    let model = Model::<f64>::new(ModelConfig::default(), 8).unwrap();
    let mut tape = Tape::inference();
    let a_val = random::<f64>(&[2, 32, 4, 6], 9);
    let a = tape.leaf(a_val.clone());
    let mut g = Graph::new(&mut tape, model.weights(), BnMode::Inference, 1e-3, false);
    let trace = g.attention(a).unwrap();
    assert_eq!(tape.value(trace.pam_out), &a_val);
    assert_eq!(tape.value(trace.cam_out), &a_val);
    assert_eq!(tape.shape(trace.fused), a_val.shape());
    assert_eq!(tape.shape(trace.pam_attention), &[2, 24, 24]);
    assert_eq!(tape.shape(trace.cam_attention), &[2, 32, 32]);
    for attn in [trace.pam_attention, trace.cam_attention] {
        let t = tape.value(attn);
        let row = *t.shape().last().unwrap();
        for r in t.data().chunks(row) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn fuse_of_identical_inputs_is_twice_one_branch() {
    let mut model = Model::<f64>::new(ModelConfig::default(), 10).unwrap();
    let w = model.weights_mut();
    for suffix in ["conv.weight", "bn.gamma", "bn.beta", "act.slope"] {
        let src = w.params[&format!("attention.fuse_pam.{suffix}")].clone();
        w.params.insert(format!("attention.fuse_cam.{suffix}"), src);
    }
    let x = random::<f64>(&[1, 32, 3, 3], 11);
    let mut tape = Tape::inference();
    let xv = tape.leaf(x);
    let mut g = Graph::new(&mut tape, model.weights(), BnMode::Inference, 1e-3, false);
    let both = g.attention_fuse(xv, xv).unwrap();
    let one = g.conv_bn_act(xv, "attention.fuse_pam", ConvParams::same(3, 1)).unwrap();
    let twice = tensor::scale(tape.value(one), 2.0);
    assert!(tape.value(both).max_abs_diff(&twice) < 1e-12);
}

#[test]
fn disabled_attention_passes_encoder_output_through() {
    let cfg = ModelConfig { attention: false, ..ModelConfig::default() };
    let model = Model::<f32>::new(cfg.clone(), 12).unwrap();
    assert!(!model.weights().params.keys().any(|k| k.starts_with("attention.")));
    let mut tape = Tape::inference();
    let x = tape.leaf(random(&[1, 3, 16, 16], 13));
    let pass = {
        let mut g = Graph::new(&mut tape, model.weights(), BnMode::Inference, 1e-3, false);
        g.model(x, &cfg).unwrap()
    };
    assert!(!tape.op_names().contains(&"bmm"));
    assert!(matches!(pass, HeadOutputs::Two { .. }));
}

#[test]
fn esp_shapes_and_hierarchical_fusion_oracle() {
    let cfg = EspConfig::new(10, 10, 1, &[1, 2, 4, 8, 16]).unwrap();
    let weights: Weights<f64> = Weights::init(&esp_schema("esp", &cfg), 14);
    let x = random::<f64>(&[2, 10, 9, 7], 15);
    let mut tape = Tape::inference();
    let xv = tape.leaf(x.clone());
    let mut g = Graph::new(&mut tape, &weights, BnMode::Inference, 1e-3, false);
    let branches = g.esp_branches(xv, "esp", &cfg).unwrap();
    let out = g.esp(xv, "esp", &cfg).unwrap();
    assert_eq!(tape.shape(out), x.shape());

    // Oracle: prefix sums of the raw branch outputs, concatenated, plus residual,
    // then BN at init statistics (scale 1/sqrt(1 + eps)) and PReLU(0.25).
    let raw: Vec<&Tensor<f64>> = branches.iter().map(|&b| tape.value(b)).collect();
    let (n, c, h, w) = (2, 2, 9, 7);
    let mut expected = vec![0.0; n * 10 * h * w];
    for b in 0..n {
        for k in 0..5 {
            for ch in 0..c {
                for p in 0..h * w {
                    let prefix: f64 = (0..=k).map(|j| raw[j].data()[(b * c + ch) * h * w + p]).sum();
                    let idx = (b * 10 + k * c + ch) * h * w + p;
                    let v = (prefix + x.data()[idx]) / (1.0f64 + 1e-3).sqrt();
                    expected[idx] = if v < 0.0 { 0.25 * v } else { v };
                }
            }
        }
    }
    let got = tape.value(out);
    let err = got.data().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");

    let down = EspConfig::new(10, 20, 2, &[1, 2, 4, 8, 16]).unwrap();
    let weights: Weights<f64> = Weights::init(&esp_schema("down", &down), 16);
    let mut g = Graph::new(&mut tape, &weights, BnMode::Inference, 1e-3, false);
    let y = g.esp(xv, "down", &down).unwrap();
    assert_eq!(tape.shape(y), &[2, 20, 5, 4]);
    let bad = EspConfig::new(12, 20, 2, &[1, 2, 4, 8, 16]).unwrap();
    let mut g = Graph::new(&mut tape, &weights, BnMode::Inference, 1e-3, false);
    assert!(g.esp(xv, "down", &bad).is_err());
}

fn small_targets(mode: HeadMode, seed: u64) -> Targets<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = |classes: u8| -> Vec<u8> { (0..256).map(|_| rng.random_range(0..classes)).collect() };
    match mode {
        HeadMode::TwoHeads => Targets::Two {
            da: one_hot(&[&labels(2)], 2, 16, 16).unwrap(),
            lane: one_hot(&[&labels(2)], 2, 16, 16).unwrap(),
        },
        HeadMode::SingleHead => Targets::Single(one_hot(&[&labels(3)], 3, 16, 16).unwrap()),
    }
}

/// Attention scales and BN statistics moved off their init values so every path carries gradient.
fn perturbed(cfg: ModelConfig, seed: u64) -> Model<f64> {
    let mut model = Model::<f64>::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let w = model.weights_mut();
    for (name, t) in w.params.iter_mut() {
        if name.ends_with(".scale") {
            *t = Tensor::scalar(0.3);
        } else if name.ends_with(".bn.beta") || name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    model
}

#[test]
fn end_to_end_gradcheck_eval_mode() {
    let mut model = perturbed(ModelConfig::default(), 20);
    model.set_mode(Mode::Eval);
    let x = random::<f64>(&[1, 3, 16, 16], 21);
    let targets = small_targets(HeadMode::TwoHeads, 22);
    let report = gradcheck_model(&model, &x, &targets, &LossConfig::default(), 200, 23, DEFAULT_FD_STEP).unwrap();
    assert_eq!(report.checked, 400);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn end_to_end_gradcheck_single_head_training_mode() {
    let model = perturbed(ModelConfig::baseline(), 30);
    let x = random::<f64>(&[2, 3, 16, 16], 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let labels: Vec<Vec<u8>> = (0..2).map(|_| (0..256).map(|_| rng.random_range(0..3)).collect()).collect();
    let refs: Vec<&[u8]> = labels.iter().map(Vec::as_slice).collect();
    let targets = Targets::Single(one_hot(&refs, 3, 16, 16).unwrap());
    let report = gradcheck_model(&model, &x, &targets, &LossConfig::default(), 100, 33, DEFAULT_FD_STEP).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn model_gradcheck_rejects_single_precision() {
    let model = Model::<f32>::new(ModelConfig::baseline(), 0).unwrap();
    let x = Tensor::<f32>::zeros(&[1, 3, 16, 16]);
    let t = Targets::Single(Tensor::zeros(&[1, 3, 16, 16]));
    assert!(gradcheck_model(&model, &x, &t, &LossConfig::default(), 1, 0, 1e-5).is_err());
}

#[test]
fn running_stats_move_only_through_update() {
    let mut model = Model::<f32>::new(ModelConfig::default(), 40).unwrap();
    let before = model.weights().clone();
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[2, 3, 16, 16], 41));
    let pass = model.forward(&mut tape, x).unwrap();
    assert_eq!(model.weights(), &before);
    model.update_running_stats(&pass.bn_stats, 0.1).unwrap();
    assert_ne!(model.weights().buffers, before.buffers);
    assert_eq!(model.weights().params, before.params);
}
