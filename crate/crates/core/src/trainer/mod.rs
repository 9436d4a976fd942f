//! Adam with poly learning-rate decay, the training loop, and checkpoints.

mod checkpoint;

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{batch_iter, Sample};
use crate::error::{Error, Result};
use crate::grad::Tape;
use crate::loss::LossConfig;
use crate::nn::{model_loss_on_tape, Model, Mode};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub bn_momentum: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 5e-4,
            poly_power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            bn_momentum: 0.1,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be ≥ 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and ≥ 0, got {}", self.lr)));
        }
        for (what, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{what} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) || !(self.poly_power >= 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("eps must be > 0, poly power ≥ 0, bn momentum in [0, 1]"));
        }
        self.loss.validate()
    }
}

/// `lr0 · (1 − epoch/epochs)^power`, for `0 ≤ epoch < epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::invalid(format!("epoch {epoch} outside schedule of {} epochs", cfg.epochs)));
    }
    Ok(cfg.lr * (1.0 - epoch as f64 / cfg.epochs as f64).powf(cfg.poly_power))
}

/// First and second moments per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Element = f32> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Element> Default for OptimState<T> {
    fn default() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads` must cover exactly the keys of `params`.
pub fn adam_step<T: Element>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate must be ≥ 0, got {lr}")));
    }
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::WeightMismatch {
            name: name.clone(),
            detail: "no gradient".into(),
        })?;
        if g.shape() != p.shape() {
            return Err(Error::WeightMismatch {
                name: name.clone(),
                detail: format!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape()),
            });
        }
    }
    if let Some(extra) = grads.keys().find(|k| !params.contains_key(*k)) {
        return Err(Error::WeightMismatch {
            name: extra.clone(),
            detail: "gradient for unknown parameter".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gf = gv.as_f64();
            let mf = b1 * mv.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vv.as_f64() + (1.0 - b2) * gf * gf;
            *mv = T::from_f64_lossy(mf);
            *vv = T::from_f64_lossy(vf);
            let update = lr * (mf / c1) / ((vf / c2).sqrt() + cfg.eps);
            *pv = T::from_f64_lossy(pv.as_f64() - update);
        }
    }
    Ok(())
}

/// Mean losses of one epoch (1-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    /// Absent for the single-head model.
    pub loss_da: Option<f64>,
    pub loss_lane: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,lr,loss_total,loss_da,loss_lane";

    /// Comma-separated rows; per-head columns are empty for the single-head model.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.8}")).unwrap_or_default();
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.8e},{:.8},{},{}",
                r.epoch,
                r.lr,
                r.loss_total,
                opt(r.loss_da),
                opt(r.loss_lane)
            );
        }
        out
    }
}

/// Trains in place; `on_epoch` runs after every epoch (logging, checkpoints).
/// The model is left in eval mode.
pub fn train<T: Element>(
    model: &mut Model<T>,
    samples: &[Sample],
    cfg: &TrainConfig,
    state: &mut OptimState<T>,
    mut on_epoch: impl FnMut(&EpochRecord, &Model<T>, &OptimState<T>) -> Result<()>,
) -> Result<History> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let head_mode = model.config().head_mode;
    let mut history = History::default();
    model.set_mode(Mode::Train);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        let (mut total, mut da, mut lane, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for (b, batch) in batch_iter::<T>(samples, cfg.batch_size, cfg.seed, epoch, head_mode)?.enumerate() {
            let batch = batch?;
            let n = batch.ids.len();
            let mut tape = Tape::new();
            let x = tape.leaf(batch.images);
            let pass = model.forward(&mut tape, x)?;
            let loss = model_loss_on_tape(&mut tape, pass.outputs, &batch.targets, &cfg.loss)?;
            let value = tape.value(loss.total).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b + 1,
                });
            }
            total += value * n as f64;
            da += loss.da.map_or(0.0, |v| tape.value(v).item().as_f64()) * n as f64;
            lane += loss.lane.map_or(0.0, |v| tape.value(v).item().as_f64()) * n as f64;
            seen += n;

            let mut grads = tape.backward(loss.total)?;
            let mut named = BTreeMap::new();
            for (name, p) in &model.weights().params {
                let g = pass
                    .params
                    .get(name)
                    .and_then(|&v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(p.shape()));
                named.insert(name.clone(), g);
            }
            drop(tape);
            adam_step(&mut model.weights_mut().params, &named, state, lr, cfg)?;
            model.update_running_stats(&pass.bn_stats, cfg.bn_momentum)?;
        }
        let two = loss_has_heads(model);
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss_total: total / seen as f64,
            loss_da: two.then_some(da / seen as f64),
            loss_lane: two.then_some(lane / seen as f64),
        };
        history.epochs.push(record);
        let last = epoch + 1 == cfg.epochs;
        if last {
            model.set_mode(Mode::Eval);
        }
        on_epoch(&record, model, state)?;
    }
    Ok(history)
}

fn loss_has_heads<T: Element>(model: &Model<T>) -> bool {
    model.config().head_mode == crate::nn::HeadMode::TwoHeads
}
