//! Streaming confusion counts, IoU and mIoU.

use std::fmt;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{HeadOutputs, Model, CLASS_BACKGROUND, CLASS_LANE};
use crate::tensor::{Element, Tensor};

/// Per-class TP/FP/FN/TN pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    classes: usize,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    tn: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("confusion accumulator needs at least one class"));
        }
        Ok(Self {
            classes,
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
            tn: vec![0; classes],
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn tp(&self, class: usize) -> u64 {
        self.tp[class]
    }

    pub fn fp(&self, class: usize) -> u64 {
        self.fp[class]
    }

    pub fn fn_(&self, class: usize) -> u64 {
        self.fn_[class]
    }

    pub fn tn(&self, class: usize) -> u64 {
        self.tn[class]
    }

    /// Pixels seen so far.
    pub fn total(&self) -> u64 {
        self.tp[0] + self.fp[0] + self.fn_[0] + self.tn[0]
    }

    pub fn update(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "confusion_update",
                format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()),
            ));
        }
        if let Some(&bad) = pred.iter().chain(gt).find(|&&v| v as usize >= self.classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {} classes", self.classes)));
        }
        let mut hits = vec![0u64; self.classes];
        let mut pred_count = vec![0u64; self.classes];
        let mut gt_count = vec![0u64; self.classes];
        for (&p, &g) in pred.iter().zip(gt) {
            pred_count[p as usize] += 1;
            gt_count[g as usize] += 1;
            if p == g {
                hits[p as usize] += 1;
            }
        }
        let n = pred.len() as u64;
        for c in 0..self.classes {
            self.tp[c] += hits[c];
            self.fp[c] += pred_count[c] - hits[c];
            self.fn_[c] += gt_count[c] - hits[c];
            self.tn[c] += n + hits[c] - pred_count[c] - gt_count[c];
        }
        Ok(())
    }

    /// Adds the counts of another accumulator over the same classes.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid(format!(
                "cannot merge accumulators over {} and {} classes",
                self.classes, other.classes
            )));
        }
        for c in 0..self.classes {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
            self.tn[c] += other.tn[c];
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, or 1 when the class was never present nor predicted.
    pub fn iou(&self, class: usize) -> Result<f64> {
        if class >= self.classes {
            return Err(Error::invalid(format!("class {class} out of range for {} classes", self.classes)));
        }
        let denom = self.tp[class] + self.fp[class] + self.fn_[class];
        Ok(if denom == 0 { 1.0 } else { self.tp[class] as f64 / denom as f64 })
    }

    /// Unweighted mean of the per-class IoUs.
    pub fn miou(&self) -> f64 {
        (0..self.classes).map(|c| self.iou(c).expect("class in range")).sum::<f64>() / self.classes as f64
    }
}

/// Per-pixel argmax over channels of `[N, C, H, W]` logits, one map per
/// batch item. Ties resolve to the lower class index.
pub fn argmax_mask<T: Element>(logits: &Tensor<T>) -> Result<Vec<Vec<u8>>> {
    let (n, c, h, w) = logits.dims4("argmax_mask")?;
    if !(2..=256).contains(&c) {
        return Err(Error::shape("argmax_mask", format!("need 2..=256 channels, got {c}")));
    }
    let plane = h * w;
    Ok((0..n)
        .map(|b| {
            let item = &logits.data()[b * c * plane..][..c * plane];
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if item[k * plane + p] > item[best * plane + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

/// Drivable mIoU over {background, drivable} and lane-class IoU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationReport {
    pub drivable_miou: f64,
    pub lane_iou: f64,
    pub images: usize,
}

impl SegmentationReport {
    pub fn from_accumulators(da: &ConfusionAccumulator, lane: &ConfusionAccumulator, images: usize) -> Result<Self> {
        if da.classes() != 2 || lane.classes() != 2 {
            return Err(Error::invalid("segmentation report needs two binary accumulators"));
        }
        Ok(Self {
            drivable_miou: da.miou(),
            lane_iou: lane.iou(1)?,
            images,
        })
    }
}

impl fmt::Display for SegmentationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>8}", "metric", "value")?;
        writeln!(f, "{:<24} {:>8.2}", "drivable mIoU (%)", 100.0 * self.drivable_miou)?;
        writeln!(f, "{:<24} {:>8.2}", "lane IoU (%)", 100.0 * self.lane_iou)?;
        write!(f, "{:<24} {:>8}", "images", self.images)
    }
}

/// Binary drivable and lane maps per batch item. A single-head model's
/// drivable map is every non-background pixel, since lanes lie on the road.
pub fn predict_masks<T: Element>(outputs: &HeadOutputs<Tensor<T>>) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
    match outputs {
        HeadOutputs::Two { da, lane } => Ok(argmax_mask(da)?.into_iter().zip(argmax_mask(lane)?).collect()),
        HeadOutputs::Single(logits) => Ok(argmax_mask(logits)?
            .into_iter()
            .map(|m| {
                let da = m.iter().map(|&c| (c != CLASS_BACKGROUND) as u8).collect();
                let lane = m.iter().map(|&c| (c == CLASS_LANE) as u8).collect();
                (da, lane)
            })
            .collect()),
    }
}

/// Inference-mode metrics of `model` over `samples`, against their masks as given.
pub fn evaluate<T: Element>(model: &Model<T>, samples: &[Sample]) -> Result<SegmentationReport> {
    let mut da = ConfusionAccumulator::new(2)?;
    let mut lane = ConfusionAccumulator::new(2)?;
    for s in samples {
        let x = s.image.cast::<T>().reshape(&[1, 3, s.height(), s.width()])?;
        for (pd, pl) in predict_masks(&model.infer(&x)?)? {
            da.update(&pd, s.da.data())?;
            lane.update(&pl, s.lane.data())?;
        }
    }
    SegmentationReport::from_accumulators(&da, &lane, samples.len())
}
