use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use twinlite::data::{
    load_dataset, load_sample, parse_size, read_rgb, resize_image, synth_sample, write_mask, write_rgb, write_sample,
    Mask, PreprocessConfig, Sample, Split,
};
use twinlite::metrics::{evaluate, predict_masks, ConfusionAccumulator, SegmentationReport};
use twinlite::nn::{HeadMode, HeadOutputs, Model};
use twinlite::reparam::fuse_model;
use twinlite::trainer::{load_checkpoint, save_checkpoint, train as run_training, Checkpoint, OptimState};
use twinlite::Tensor;

use crate::settings::TrainSettings;

/// Overlay tint for drivable pixels: RGB and alpha.
const DRIVABLE_TINT: ([f32; 3], f32) = ([0.0, 1.0, 0.0], 0.4);
/// Overlay tint for lane pixels, applied to the original pixel.
const LANE_TINT: ([f32; 3], f32) = ([1.0, 0.0, 0.0], 0.7);
/// Seed of the synthetic scene used as the fuse probe and bench input.
const PROBE_SEED: u64 = 0x5eed;

pub fn gen_data(out: &Path, count: usize, seed: u64, size: &str) -> anyhow::Result<()> {
    let (w, h) = parse_size(size)?;
    if count == 0 {
        bail!("--count must be ≥ 1");
    }
    // Validates the size before anything is written.
    synth_sample(seed, 0, w, h)?;
    let n_val = (count + 5) / 10;
    let n_train = count - n_val;
    for i in 0..count {
        let sample = synth_sample(seed, i as u64, w, h)?;
        let split = if i < n_train { Split::Train } else { Split::Val };
        write_sample(out, split, &sample)?;
    }
    println!("wrote {n_train} train + {n_val} val samples ({w}x{h}) to {}", out.display());
    Ok(())
}

fn load_split(root: &Path, split: Split, cfg: &PreprocessConfig) -> anyhow::Result<Vec<Sample>> {
    let index = load_dataset(root, split)?;
    (0..index.len()).map(|i| Ok(load_sample(&index, i, cfg)?)).collect()
}

/// Size of the first image of a split.
fn native_size(root: &Path, split: Split) -> anyhow::Result<(usize, usize)> {
    let index = load_dataset(root, split)?;
    let Some(files) = index.files.first() else {
        bail!("{} split of {} is empty", split, root.display());
    };
    let img = read_rgb(&files.image)?;
    Ok((img.shape()[2], img.shape()[1]))
}

fn head_count(model: &Model) -> usize {
    match model.config().head_mode {
        HeadMode::TwoHeads => 2,
        HeadMode::SingleHead => 1,
    }
}

pub fn train(s: TrainSettings) -> anyhow::Result<()> {
    let (w, h) = match s.size {
        Some(size) => size,
        None => native_size(&s.data, Split::Train)?,
    };
    let mut pre = PreprocessConfig::train(w, h);
    if let Some(d) = s.lane_dilation {
        pre.lane_dilation = d;
    }
    pre.validate()?;
    let samples = load_split(&s.data, Split::Train, &pre)?;
    if samples.is_empty() {
        bail!("train split of {} is empty", s.data.display());
    }
    let mut model = Model::<f32>::new(s.model.clone(), s.train.seed)?;
    println!("parameters: {}", model.param_count());
    println!(
        "training on {} samples at {w}x{h}, lane dilation {}, {} epochs",
        samples.len(),
        if pre.dilate { pre.lane_dilation } else { 0 },
        s.train.epochs
    );

    let mut state = OptimState::default();
    let mut rows = Vec::new();
    let epochs = s.train.epochs;
    let history = run_training(&mut model, &samples, &s.train, &mut state, |r, m, st| {
        println!("epoch {}/{epochs} lr {:.3e} loss {:.6}", r.epoch, r.lr, r.loss_total);
        rows.push(*r);
        let last = r.epoch == epochs;
        if last || (s.save_every > 0 && r.epoch % s.save_every == 0) {
            let ckpt = Checkpoint {
                model: m.clone(),
                optim: Some(st.clone()),
                input_size: Some((w, h)),
            };
            save_checkpoint(&s.out, &ckpt)?;
        }
        let partial = twinlite::trainer::History { epochs: rows.clone() };
        std::fs::write(&s.history, partial.to_csv()).map_err(|e| twinlite::Error::Io {
            path: s.history.clone(),
            source: e,
        })
    })?;
    let first = history.epochs.first().map_or(0.0, |r| r.loss_total);
    let last = history.epochs.last().map_or(0.0, |r| r.loss_total);
    println!("final loss {last:.6} ({:.2}% of epoch 1)", 100.0 * last / first);
    println!("checkpoint: {}", s.out.display());
    println!("history: {}", s.history.display());
    Ok(())
}

pub fn eval(data: &Path, ckpt: Option<&Path>, split: &str, oracle: bool) -> anyhow::Result<()> {
    let split: Split = split.parse()?;
    let report = if oracle {
        let (w, h) = native_size(data, split)?;
        let samples = load_split(data, split, &PreprocessConfig::train(w, h).eval())?;
        let mut da = ConfusionAccumulator::new(2)?;
        let mut lane = ConfusionAccumulator::new(2)?;
        for s in &samples {
            da.update(s.da.data(), s.da.data())?;
            lane.update(s.lane.data(), s.lane.data())?;
        }
        println!("mode: oracle (ground truth against itself)");
        SegmentationReport::from_accumulators(&da, &lane, samples.len())?
    } else {
        let Some(path) = ckpt else {
            bail!("--ckpt is required unless --oracle is given");
        };
        let c = load_checkpoint(path)?;
        let (w, h) = match c.input_size {
            Some(size) => size,
            None => native_size(data, split)?,
        };
        let samples = load_split(data, split, &PreprocessConfig::train(w, h).eval())
            .with_context(|| format!("loading {split} split at the checkpoint's {w}x{h}"))?;
        println!("heads: {}", head_count(&c.model));
        evaluate(&c.model, &samples)?
    };
    println!("split: {split}");
    println!("{report}");
    Ok(())
}

/// `(1 − a)·pixel + a·colour` on every pixel where `mask` is set.
fn tint(out: &mut Tensor<f32>, base: &Tensor<f32>, mask: &[u8], (colour, alpha): ([f32; 3], f32)) {
    let plane = mask.len();
    for (ch, &c) in colour.iter().enumerate() {
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m == 1) {
            let j = ch * plane + i;
            out.data_mut()[j] = (1.0 - alpha) * base.data()[j] + alpha * c;
        }
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}_{suffix}.png"))
}

pub fn infer(image: &Path, ckpt: &Path, out: &Path, raw: bool) -> anyhow::Result<()> {
    let c = load_checkpoint(ckpt)?;
    let input = read_rgb(image)?;
    let (w, h) = c.input_size.unwrap_or((input.shape()[2], input.shape()[1]));
    let resized = resize_image(&input, w, h)?;
    let outputs = c.model.infer(&resized.clone().reshape(&[1, 3, h, w])?)?;
    let (da, lane) = predict_masks(&outputs)?.remove(0);
    let mut overlay = resized.clone();
    tint(&mut overlay, &resized, &da, DRIVABLE_TINT);
    tint(&mut overlay, &resized, &lane, LANE_TINT);
    write_rgb(out, &overlay)?;
    println!("overlay: {} ({w}x{h})", out.display());
    if raw {
        for (mask, name) in [(da, "da"), (lane, "lane")] {
            let path = suffixed(out, name);
            write_mask(&path, &Mask::new(w, h, mask)?)?;
            println!("mask: {}", path.display());
        }
    }
    Ok(())
}

fn probe(size: (usize, usize)) -> anyhow::Result<Tensor<f32>> {
    let (w, h) = size;
    Ok(synth_sample(PROBE_SEED, 0, w, h)?.image.reshape(&[1, 3, h, w])?)
}

fn max_abs_deviation(a: &HeadOutputs<Tensor<f32>>, b: &HeadOutputs<Tensor<f32>>) -> anyhow::Result<f32> {
    match (a, b) {
        (HeadOutputs::Two { da, lane }, HeadOutputs::Two { da: da2, lane: lane2 }) => {
            Ok(da.max_abs_diff(da2).max(lane.max_abs_diff(lane2)))
        }
        (HeadOutputs::Single(x), HeadOutputs::Single(y)) => Ok(x.max_abs_diff(y)),
        _ => bail!("fused model changed its head layout"),
    }
}

pub fn fuse(ckpt: &Path, out: &Path) -> anyhow::Result<()> {
    let c = load_checkpoint(ckpt)?;
    if c.model.config().fused {
        bail!("{} is already fused", ckpt.display());
    }
    let fused = fuse_model(&c.model)?;
    let x = probe(c.input_size.unwrap_or((64, 64)))?;
    let deviation = max_abs_deviation(&c.model.infer(&x)?, &fused.infer(&x)?)?;
    println!("parameters before: {}", c.model.param_count());
    println!("parameters after: {}", fused.param_count());
    println!("max abs deviation: {deviation:.3e}");
    save_checkpoint(
        out,
        &Checkpoint {
            model: fused,
            optim: None,
            input_size: c.input_size,
        },
    )?;
    println!("fused checkpoint: {}", out.display());
    Ok(())
}

/// Value at quantile `q` of sorted `v` (nearest rank).
fn quantile(v: &[f64], q: f64) -> f64 {
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

fn median(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn bench(ckpt: &Path, size: &str, iters: usize, warmup: usize) -> anyhow::Result<()> {
    if iters == 0 {
        bail!("--iters must be ≥ 1");
    }
    let (w, h) = parse_size(size)?;
    let c = load_checkpoint(ckpt)?;
    let x = probe((w, h))?;
    for _ in 0..warmup {
        c.model.infer(&x)?;
    }
    let mut ms: Vec<f64> = (0..iters)
        .map(|_| {
            let t = Instant::now();
            c.model.infer(&x).map(|_| t.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_, _>>()?;
    ms.sort_by(f64::total_cmp);
    let med = median(&ms);
    println!("input: 1x3x{h}x{w}");
    println!("fused: {}", c.model.config().fused);
    println!("parameters: {}", c.model.param_count());
    println!("iterations: {iters} (warmup {warmup})");
    println!("median ms: {med:.3}");
    println!("p90 ms: {:.3}", quantile(&ms, 0.9));
    println!("fps: {:.2}", 1000.0 / med);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_of_small_samples() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(median(&v), 2.5);
        assert_eq!(median(&v[..3]), 2.0);
        assert_eq!(quantile(&v, 0.9), 4.0);
        assert_eq!(quantile(&[7.0], 0.9), 7.0);
    }

    #[test]
    fn tint_blends_only_masked_pixels() {
        let base = Tensor::new(vec![3, 1, 2], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let mut out = base.clone();
        tint(&mut out, &base, &[1, 0], ([1.0, 0.0, 0.0], 0.5));
        assert_eq!(out.data(), &[0.75, 0.5, 0.25, 0.5, 0.25, 0.5]);
    }

    #[test]
    fn raw_mask_names() {
        assert_eq!(suffixed(Path::new("/a/b/x.png"), "da"), PathBuf::from("/a/b/x_da.png"));
    }
}
