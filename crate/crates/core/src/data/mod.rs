//! Samples, preprocessing, synthetic scenes, dataset files and batching.

mod batch;
mod io;
mod preprocess;
mod synth;

pub use batch::{batch_iter, epoch_order, make_batch, single_head_labels, Batch};
pub use io::{load_dataset, load_sample, read_mask, read_rgb, write_mask, write_rgb, write_sample, DatasetIndex, Split};
pub use preprocess::{
    default_lane_dilation, dilate_lane, merge_drivable, resize_image, resize_mask, resize_pair, RAW_ALTERNATIVE,
    RAW_BACKGROUND, RAW_DIRECT,
};
pub use synth::{synth_generate, synth_sample, LANE_WIDTH_PX};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary `height × width` map holding only 0 and 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::shape(
                "mask",
                format!("{width}x{height} mask cannot hold {} values", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask values must be 0 or 1, found {v}")));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub(crate) fn set(&mut self, x: usize, y: usize) {
        self.data[y * self.width + x] = 1;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Every set pixel of `self` is set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.len() == other.data.len() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }
}

/// An RGB image in `[0, 1]` with its drivable-area and lane masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]`.
    pub image: Tensor<f32>,
    pub da: Mask,
    pub lane: Mask,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.da.width()
    }

    pub fn height(&self) -> usize {
        self.da.height()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |detail: String| Error::Dataset {
            id: self.id.clone(),
            detail,
        };
        let (w, h) = (self.da.width(), self.da.height());
        if self.image.shape() != [3, h, w] {
            return Err(err(format!("image shape {:?} does not match {w}x{h} masks", self.image.shape())));
        }
        if (self.lane.width(), self.lane.height()) != (w, h) {
            return Err(err("lane mask size differs from drivable mask".into()));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(err("image values outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Target size and lane-label dilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocessConfig {
    pub width: usize,
    pub height: usize,
    /// Total growth in pixels; the structuring element is `(extent + 1)` square.
    pub lane_dilation: usize,
    /// Applied for training pipelines only.
    pub dilate: bool,
}

impl PreprocessConfig {
    /// Training pipeline at `width × height` with the width-scaled dilation.
    pub fn train(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            lane_dilation: default_lane_dilation(width),
            dilate: true,
        }
    }

    /// The matching evaluation pipeline: same size, labels left thin.
    pub fn eval(self) -> Self {
        Self { dilate: false, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(8) || !self.height.is_multiple_of(8) {
            return Err(Error::invalid(format!(
                "target size {}x{} must be positive and divisible by 8",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Resize then, for training, dilate the lane mask.
    pub fn apply(&self, sample: &Sample) -> Result<Sample> {
        self.validate()?;
        let mut out = resize_pair(sample, self.width, self.height)?;
        if self.dilate && self.lane_dilation > 0 {
            out.lane = dilate_lane(&out.lane, self.lane_dilation);
        }
        Ok(out)
    }
}

/// Parses `WxH`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::invalid(format!("size `{s}` is not of the form WxH"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    Ok((w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rejects_non_binary() {
        assert!(Mask::new(2, 1, vec![0, 255]).is_err());
        assert!(Mask::new(2, 2, vec![0, 1]).is_err());
        assert_eq!(Mask::new(2, 1, vec![1, 1]).unwrap().count_ones(), 2);
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("640x360").unwrap(), (640, 360));
        assert!(parse_size("640").is_err());
        assert!(parse_size("ax3").is_err());
    }

    #[test]
    fn target_must_divide_by_eight() {
        assert!(PreprocessConfig::train(50, 50).validate().is_err());
        PreprocessConfig::train(64, 64).validate().unwrap();
    }
}
