use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinlite::grad::Tape;
use twinlite::nn::{HeadMode, HeadOutputs, Mode, Model, ModelConfig};
use twinlite::reparam::{fuse_conv_bn, fuse_model, BnParams, ConvLayout};
use twinlite::tensor::{batch_norm_eval, conv2d, conv_transpose2d, ConvParams, RunningStats};
use twinlite::trainer::{load_checkpoint, save_checkpoint, Checkpoint};
use twinlite::{Element, Tensor};

/// A model whose affine parameters and running statistics look trained:
/// random γ/β and attention scales, statistics taken from one training batch.
fn calibrated<T: Element>(cfg: ModelConfig, seed: u64) -> Model<T> {
    let mut model = Model::<f32>::new(cfg, seed).unwrap().cast::<T>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca1);
    for (name, t) in model.weights_mut().params.iter_mut() {
        let range = if name.ends_with(".bn.gamma") {
            0.5..1.5
        } else if name.ends_with(".bn.beta") {
            -0.2..0.2
        } else if name.ends_with(".scale") {
            0.1..0.5
        } else {
            continue;
        };
        t.data_mut().iter_mut().for_each(|v| *v = T::from_f64_lossy(rng.random_range(range.clone())));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_fn(&[2, 3, 32, 32], |_| T::from_f64_lossy(rng.random_range(0.0..1.0))));
    let pass = model.forward(&mut tape, x).unwrap();
    model.update_running_stats(&pass.bn_stats, 1.0).unwrap();
    model.set_mode(Mode::Eval);
    model
}

fn deviation<T: Element>(a: &HeadOutputs<Tensor<T>>, b: &HeadOutputs<Tensor<T>>) -> f64 {
    match (a, b) {
        (HeadOutputs::Two { da, lane }, HeadOutputs::Two { da: d, lane: l }) => {
            da.max_abs_diff(d).as_f64().max(lane.max_abs_diff(l).as_f64())
        }
        (HeadOutputs::Single(x), HeadOutputs::Single(y)) => x.max_abs_diff(y).as_f64(),
        _ => f64::INFINITY,
    }
}

fn configs() -> Vec<ModelConfig> {
    let single = ModelConfig {
        head_mode: HeadMode::SingleHead,
        ..ModelConfig::default()
    };
    vec![ModelConfig::default(), ModelConfig::baseline(), single]
}

fn input<T: Element>(seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, 3, 32, 40], |_| T::from_f64_lossy(rng.random_range(0.0..1.0)))
}

#[test]
fn fused_model_matches_in_double_precision() {
    for (i, cfg) in configs().into_iter().enumerate() {
        let model = calibrated::<f64>(cfg, i as u64);
        let fused = fuse_model(&model).unwrap();
        assert!(fused.config().fused);
        assert!(fused.param_count() < model.param_count());
        let x = input::<f64>(50 + i as u64);
        let d = deviation(&model.infer(&x).unwrap(), &fused.infer(&x).unwrap());
        assert!(d < 1e-10, "config {i}: deviation {d:e}");
    }
}

#[test]
fn fused_model_matches_in_single_precision() {
    let model = calibrated::<f32>(ModelConfig::default(), 9);
    let fused = fuse_model(&model).unwrap();
    for seed in 0..3 {
        let x = input::<f32>(seed);
        let d = deviation(&model.infer(&x).unwrap(), &fused.infer(&x).unwrap());
        assert!(d < 1e-4, "input {seed}: deviation {d:e}");
    }
}

#[test]
fn fusing_requires_eval_mode_and_is_idempotent() {
    let mut model = calibrated::<f32>(ModelConfig::baseline(), 3);
    let fused = fuse_model(&model).unwrap();
    assert_eq!(fuse_model(&fused).unwrap().weights(), fused.weights());
    model.set_mode(Mode::Train);
    assert!(fuse_model(&model).is_err());
}

#[test]
fn fused_checkpoint_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fused.ckpt");
    let fused = fuse_model(&calibrated::<f32>(ModelConfig::default(), 4)).unwrap();
    let ckpt = Checkpoint {
        model: fused.clone(),
        optim: None,
        input_size: Some((40, 32)),
    };
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.input_size, Some((40, 32)));
    assert!(back.model.config().fused);
    let x = input::<f32>(5);
    assert_eq!(deviation(&back.model.infer(&x).unwrap(), &fused.infer(&x).unwrap()), 0.0);
}

fn vector(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(&[n], |_| rng.random_range(lo..hi))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fused_conv_equals_conv_then_batch_norm(
        seed in any::<u64>(), cin in 1usize..=4, cout in 1usize..=4, k in 1usize..=3, bias in any::<bool>(), transposed in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[2, cin, 5, 6], |_| rng.random_range(-1.0..1.0));
        let shape = if transposed { [cin, cout, k, k] } else { [cout, cin, k, k] };
        let w = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
        let b = bias.then(|| vector(&mut rng, cout, -1.0, 1.0));
        let (gamma, beta) = (vector(&mut rng, cout, 0.1, 2.0), vector(&mut rng, cout, -1.0, 1.0));
        let stats = RunningStats { mean: vector(&mut rng, cout, -1.0, 1.0), var: vector(&mut rng, cout, 0.01, 3.0) };
        let eps = 1e-3;
        let conv = |w: &Tensor<f64>, b: Option<&Tensor<f64>>| {
            if transposed {
                conv_transpose2d(&x, w, b, 2).unwrap()
            } else {
                conv2d(&x, w, b, ConvParams { padding: k / 2, ..ConvParams::default() }).unwrap()
            }
        };
        let reference = batch_norm_eval(&conv(&w, b.as_ref()), &gamma, &beta, &stats, eps).unwrap();
        let bn = BnParams { gamma: &gamma, beta: &beta, mean: &stats.mean, var: &stats.var, eps };
        let layout = if transposed { ConvLayout::Transposed } else { ConvLayout::Conv };
        let f = fuse_conv_bn(&w, b.as_ref(), bn, layout).unwrap();
        prop_assert!(conv(&f.weight, Some(&f.bias)).max_abs_diff(&reference) < 1e-12);
    }
}
