use std::path::Path;
use std::process::{Command, Output};

use twinlite::data::{read_mask, read_rgb, synth_sample, write_rgb};
use twinlite::nn::{Mode, Model, ModelConfig};
use twinlite::trainer::{save_checkpoint, Checkpoint};

fn exec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twinlite")).args(args).output().unwrap()
}

/// Stdout of a successful run.
fn ok(args: &[&str]) -> String {
    let out = exec(args);
    assert!(out.status.success(), "`{}`: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Stderr of a run that must fail.
fn fails(args: &[&str]) -> String {
    let out = exec(args);
    assert!(!out.status.success(), "`{}` unexpectedly succeeded", args.join(" "));
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn field(out: &str, label: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(label))
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("no `{label}` in:\n{out}"))
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for split in ["train", "val"] {
        for kind in ["images", "da_masks", "lane_masks"] {
            let mut names: Vec<_> = std::fs::read_dir(dir.join(split).join(kind)).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            for p in names {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out
}

fn gen(dir: &Path, count: usize) {
    ok(&["gen-data", "--out", s(dir), "--count", &count.to_string(), "--seed", "3", "--size", "32x32"]);
}

/// A checkpoint whose classifiers ignore their input and always pick background.
fn background_checkpoint(path: &Path) {
    let mut model = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
    for (name, t) in model.weights_mut().params.iter_mut() {
        if name.contains("classifier") {
            let bias = name.ends_with("bias");
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if bias && i == 0 { 10.0 } else { 0.0 });
        }
    }
    model.set_mode(Mode::Eval);
    let ckpt = Checkpoint {
        model,
        optim: None,
        input_size: Some((32, 32)),
    };
    save_checkpoint(path, &ckpt).unwrap();
}

#[test]
fn gen_data_splits_ninety_ten_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = ok(&["gen-data", "--out", s(&a), "--count", "20", "--seed", "3", "--size", "32x32"]);
    assert!(out.contains("18 train + 2 val"), "{out}");
    gen(&b, 20);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 3 * 20);
    assert!(fa == fb, "reruns with the same seed differ");

    let err = fails(&["gen-data", "--out", s(&dir.path().join("c")), "--size", "50x50"]);
    assert!(err.contains("divisible by 8"), "{err}");
}

#[test]
fn oracle_eval_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 10);
    for split in ["train", "val"] {
        let out = ok(&["eval", "--data", s(dir.path()), "--split", split, "--oracle"]);
        assert_eq!(field(&out, "drivable mIoU (%)"), 100.0);
        assert_eq!(field(&out, "lane IoU (%)"), 100.0);
    }
    let err = fails(&["eval", "--data", s(dir.path())]);
    assert!(err.contains("--ckpt"), "{err}");
}

#[test]
fn untrained_model_barely_finds_lanes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.ckpt");
    gen(&data, 20);
    let out = ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "1", "--lr", "0"]);
    assert_eq!(field(&out, "parameters:"), 439_632.0);
    let report = ok(&["eval", "--data", s(&data), "--ckpt", s(&ckpt)]);
    assert_eq!(field(&report, "heads:"), 2.0);
    assert_eq!(field(&report, "images"), 2.0);
    assert!(field(&report, "lane IoU (%)") < 20.0, "{report}");
}

#[test]
fn ablation_flags_change_the_printed_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, 2);
    let train = |name: &str, flag: &str| {
        let ckpt = dir.path().join(name);
        let out = ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "1", flag]);
        (field(&out, "parameters:"), ckpt)
    };
    let (plain, _) = train("plain.ckpt", "--seed=0");
    let (no_attention, _) = train("noatt.ckpt", "--no-attention");
    let (_, single) = train("single.ckpt", "--single-head");
    assert!(no_attention < plain);
    let report = ok(&["eval", "--data", s(&data), "--ckpt", s(&single), "--split", "train"]);
    assert_eq!(field(&report, "heads:"), 1.0);
}

#[test]
fn flags_and_config_file_train_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, 4);
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let flags = ["--epochs", "2", "--batch", "2", "--lr", "1e-3", "--seed", "9", "--no-attention"];
    ok(&[&["train", "--data", s(&data), "--out", s(&a)][..], &flags[..]].concat());
    let toml = dir.path().join("run.toml");
    std::fs::write(
        &toml,
        format!("data = {:?}\nout = {:?}\nepochs = 2\nbatch = 2\nlr = 1e-3\nseed = 9\nno_attention = true\n", s(&data), s(&b)),
    )
    .unwrap();
    ok(&["train", "--config", s(&toml)]);
    assert!(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap(), "checkpoints differ");
    let csv = std::fs::read_to_string(a.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,lr,loss_total,loss_da,loss_lane"));

    std::fs::write(&toml, "epochz = 2\n").unwrap();
    let err = fails(&["train", "--config", s(&toml)]);
    assert!(err.contains("epochz"), "{err}");
}

#[test]
fn infer_writes_overlay_and_binary_masks() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.ckpt");
    gen(&data, 4);
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "1"]);
    let image = data.join("train/images");
    let first = std::fs::read_dir(&image).unwrap().next().unwrap().unwrap().path();
    let out = dir.path().join("overlay.png");
    ok(&["infer", "--image", s(&first), "--ckpt", s(&ckpt), "--out", s(&out), "--raw"]);
    assert_eq!(read_rgb(&out).unwrap().shape(), &[3, 32, 32]);
    for suffix in ["da", "lane"] {
        // Read back at full range: 0/255 grey shows up as exactly 0.0 or 1.0.
        let raw = read_rgb(&dir.path().join(format!("overlay_{suffix}.png"))).unwrap();
        assert_eq!(raw.shape(), &[3, 32, 32]);
        assert!(raw.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn all_background_prediction_leaves_the_image_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bg.ckpt");
    background_checkpoint(&ckpt);
    let input = dir.path().join("in.png");
    let scene = synth_sample(1, 0, 32, 32).unwrap().image;
    write_rgb(&input, &scene).unwrap();
    let out = dir.path().join("out.png");
    ok(&["infer", "--image", s(&input), "--ckpt", s(&ckpt), "--out", s(&out), "--raw"]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&input).unwrap());
    for suffix in ["da", "lane"] {
        assert_eq!(read_mask(&dir.path().join(format!("out_{suffix}.png"))).unwrap().count_ones(), 0);
    }
}

#[test]
fn fuse_once_then_refuse_and_bench_reports_consistent_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, fused) = (dir.path().join("bg.ckpt"), dir.path().join("fused.ckpt"));
    background_checkpoint(&ckpt);
    let out = ok(&["fuse", "--ckpt", s(&ckpt), "--out", s(&fused)]);
    assert!(field(&out, "parameters after:") < field(&out, "parameters before:"));
    assert!(field(&out, "max abs deviation:") < 1e-4);
    let err = fails(&["fuse", "--ckpt", s(&fused), "--out", s(&dir.path().join("again.ckpt"))]);
    assert!(err.contains("already fused"), "{err}");

    let bench = ok(&["bench", "--ckpt", s(&fused), "--size", "64x32", "--iters", "5", "--warmup", "1"]);
    let median = field(&bench, "median ms:");
    assert!(field(&bench, "p90 ms:") >= median);
    let fps = field(&bench, "fps:");
    assert!((fps - 1000.0 / median).abs() <= 0.01 + 1e-3 * fps, "{bench}");
    assert!(fails(&["bench", "--ckpt", s(&fused), "--size", "60x32"]).contains("divisible by 8"));
}

#[test]
fn broken_checkpoint_is_reported_not_panicked() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("junk.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let err = fails(&["bench", "--ckpt", s(&ckpt)]);
    assert!(err.starts_with("error:") && !err.contains("panicked"), "{err}");
}
