//! Segmentation losses: focal loss, Tversky loss and their per-head and
//! whole-model combinations.
//!
//! All losses take per-pixel class probabilities `[N, C, H, W]` (softmax
//! output) and a one-hot target of the same shape. Gradients with respect
//! to the probabilities are provided alongside each loss so the tape can
//! chain them into the softmax backward.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;
const NORMALIZATION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Focal focusing exponent.
    pub gamma: f64,
    /// Tversky weight on false negatives.
    pub alpha: f64,
    /// Tversky weight on false positives.
    pub beta: f64,
    /// Added to numerator and denominator of the Tversky index.
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.7,
            beta: 0.3,
            smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("tversky alpha and beta must be >= 0"));
        }
        if !(self.smooth > 0.0) {
            return Err(Error::invalid("tversky smooth must be > 0"));
        }
        Ok(())
    }
}

/// Soft per-class confusion counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftCounts {
    pub tp: Vec<f64>,
    pub fn_: Vec<f64>,
    pub fp: Vec<f64>,
}

fn check_inputs<T: Element>(op: &'static str, probs: &Tensor<T>, target: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = probs.dims4(op)?;
    if target.shape() != probs.shape() {
        return Err(Error::shape(
            op,
            format!("target {:?} vs probabilities {:?}", target.shape(), probs.shape()),
        ));
    }
    let p = h * w;
    let data = probs.data();
    for b in 0..n {
        for i in 0..p {
            let s: f64 = (0..c).map(|ch| data[(b * c + ch) * p + i].as_f64()).sum();
            // NaN passes through so a diverged model yields a NaN loss, not a contract error.
            if (s - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(Error::invalid(format!(
                    "{op}: probabilities at batch {b}, pixel {i} sum to {s}, not 1"
                )));
            }
        }
    }
    Ok((n, c, p))
}

fn clamp(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, false)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, false)
    } else {
        (p, true)
    }
}

/// `−(1/(N·H·W)) Σ_c Σ_i p_i(c)·(1 − p̂_i(c))^γ·log p̂_i(c)`: per-image pixel
/// mean, then mean over the batch.
pub fn focal_loss<T: Element>(probs: &Tensor<T>, target: &Tensor<T>, gamma: f64) -> Result<f64> {
    let (n, _, p) = check_inputs("focal_loss", probs, target)?;
    let mut total = 0.0;
    for (&q, &t) in probs.data().iter().zip(target.data()) {
        let t = t.as_f64();
        if t == 0.0 {
            continue;
        }
        let (q, _) = clamp(q.as_f64());
        total -= t * (1.0 - q).powf(gamma) * q.ln();
    }
    Ok(total / (n * p) as f64)
}

/// Gradient of [`focal_loss`] with respect to the probabilities.
pub fn focal_loss_grad<T: Element>(probs: &Tensor<T>, target: &Tensor<T>, gamma: f64) -> Result<Tensor<T>> {
    let (n, _, p) = check_inputs("focal_loss", probs, target)?;
    let norm = (n * p) as f64;
    let mut grad = Tensor::zeros(probs.shape());
    for ((g, &q), &t) in grad.data_mut().iter_mut().zip(probs.data()).zip(target.data()) {
        let t = t.as_f64();
        let (q, inside) = clamp(q.as_f64());
        if t == 0.0 || !inside {
            continue;
        }
        let one_minus = 1.0 - q;
        let mut d = one_minus.powf(gamma) / q;
        if gamma != 0.0 {
            d -= gamma * one_minus.powf(gamma - 1.0) * q.ln();
        }
        *g = T::from_f64_lossy(-t * d / norm);
    }
    Ok(grad)
}

/// Soft TP/FN/FP per class, summed over the whole batch.
pub fn soft_counts<T: Element>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<SoftCounts> {
    let (n, c, p) = check_inputs("tversky_loss", probs, target)?;
    let mut counts = SoftCounts {
        tp: vec![0.0; c],
        fn_: vec![0.0; c],
        fp: vec![0.0; c],
    };
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * p;
            for (&q, &t) in probs.data()[off..off + p].iter().zip(&target.data()[off..off + p]) {
                let (q, t) = (q.as_f64(), t.as_f64());
                counts.tp[ch] += q * t;
                counts.fn_[ch] += (1.0 - q) * t;
                counts.fp[ch] += q * (1.0 - t);
            }
        }
    }
    Ok(counts)
}

/// `Σ_c (1 − (TP + s)/(TP + α·FN + β·FP + s))` over soft counts.
pub fn tversky_loss<T: Element>(probs: &Tensor<T>, target: &Tensor<T>, alpha: f64, beta: f64, smooth: f64) -> Result<f64> {
    let counts = soft_counts(probs, target)?;
    Ok((0..counts.tp.len())
        .map(|c| {
            let (tp, fn_, fp) = (counts.tp[c], counts.fn_[c], counts.fp[c]);
            1.0 - (tp + smooth) / (tp + alpha * fn_ + beta * fp + smooth)
        })
        .sum())
}

/// Gradient of [`tversky_loss`] with respect to the probabilities.
pub fn tversky_loss_grad<T: Element>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    alpha: f64,
    beta: f64,
    smooth: f64,
) -> Result<Tensor<T>> {
    let counts = soft_counts(probs, target)?;
    let (n, c, h, w) = probs.dims4("tversky_loss")?;
    let p = h * w;
    let mut grad = Tensor::zeros(probs.shape());
    for ch in 0..c {
        let (tp, fn_, fp) = (counts.tp[ch], counts.fn_[ch], counts.fp[ch]);
        let num = tp + smooth;
        let den = tp + alpha * fn_ + beta * fp + smooth;
        for b in 0..n {
            let off = (b * c + ch) * p;
            for i in off..off + p {
                let t = target.data()[i].as_f64();
                // d num/dq = t, d den/dq = t − α·t + β·(1 − t)
                let dden = t - alpha * t + beta * (1.0 - t);
                let d = -(t * den - num * dden) / (den * den);
                grad.data_mut()[i] = T::from_f64_lossy(d);
            }
        }
    }
    Ok(grad)
}

/// Focal plus Tversky, unweighted.
pub fn head_loss<T: Element>(probs: &Tensor<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(focal_loss(probs, target, cfg.gamma)? + tversky_loss(probs, target, cfg.alpha, cfg.beta, cfg.smooth)?)
}

/// Per-head probability maps and one-hot targets of a model output.
pub enum HeadPair<'a, T: Element> {
    Two {
        da_probs: &'a Tensor<T>,
        lane_probs: &'a Tensor<T>,
        da_target: &'a Tensor<T>,
        lane_target: &'a Tensor<T>,
    },
    Single {
        probs: &'a Tensor<T>,
        target: &'a Tensor<T>,
    },
}

/// Training objective: the two head losses with equal weight, or one
/// 3-class head loss for the single-head variant.
pub fn model_loss<T: Element>(heads: HeadPair<'_, T>, cfg: &LossConfig) -> Result<f64> {
    match heads {
        HeadPair::Two {
            da_probs,
            lane_probs,
            da_target,
            lane_target,
        } => Ok(head_loss(da_probs, da_target, cfg)? + head_loss(lane_probs, lane_target, cfg)?),
        HeadPair::Single { probs, target } => head_loss(probs, target, cfg),
    }
}

/// One-hot `[N, C, H, W]` target from class-index maps (`labels[n][y·W + x]`).
pub fn one_hot<T: Element>(labels: &[&[u8]], classes: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    let p = height * width;
    if labels.is_empty() {
        return Err(Error::invalid("one_hot: empty batch"));
    }
    let mut out = Tensor::zeros(&[labels.len(), classes, height, width]);
    for (b, lab) in labels.iter().enumerate() {
        if lab.len() != p {
            return Err(Error::shape("one_hot", format!("label map has {} pixels, expected {p}", lab.len())));
        }
        for (i, &c) in lab.iter().enumerate() {
            let c = c as usize;
            if c >= classes {
                return Err(Error::invalid(format!("one_hot: label {c} out of {classes} classes")));
            }
            out.data_mut()[(b * classes + c) * p + i] = T::one();
        }
    }
    Ok(out)
}
