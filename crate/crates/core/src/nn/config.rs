use crate::error::{Error, Result};

/// Number of classes emitted by the single-head ablation: background, drivable, lane.
pub const SINGLE_HEAD_CLASSES: usize = 3;

/// Label of each class in the single-head ablation.
pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_DRIVABLE: u8 = 1;
pub const CLASS_LANE: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadMode {
    /// Separate drivable-area and lane decoders, each emitting `classes_per_head` logits.
    TwoHeads,
    /// One decoder over {background, drivable, lane}.
    SingleHead,
}

/// One ESP block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EspConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// 1 or 2. Stride 2 makes the block a downsampler.
    pub stride: usize,
    /// Dilation of each parallel branch, in fusion order.
    pub dilations: Vec<usize>,
}

impl EspConfig {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, dilations: &[usize]) -> Result<Self> {
        let cfg = Self {
            in_channels,
            out_channels,
            stride,
            dilations: dilations.to_vec(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn branches(&self) -> usize {
        self.dilations.len()
    }

    /// Channels produced by each branch.
    pub fn branch_channels(&self) -> usize {
        self.out_channels / self.branches()
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::invalid(format!("ESP dilations must be non-empty and ≥ 1, got {:?}", self.dilations)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || !self.out_channels.is_multiple_of(self.branches()) {
            return Err(Error::invalid(format!(
                "ESP out channels {} must be a positive multiple of the branch count {}",
                self.out_channels,
                self.branches()
            )));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::invalid(format!("ESP stride must be 1 or 2, got {}", self.stride)));
        }
        Ok(())
    }
}

/// Full architectural description, including the ablation axes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub level2_channels: usize,
    /// ESP repeats after the level-2 downsampler.
    pub p: usize,
    pub level3_channels: usize,
    /// ESP repeats after the level-3 downsampler.
    pub q: usize,
    pub dilations: Vec<usize>,
    pub encoder_channels: usize,
    pub attention: bool,
    pub head_mode: HeadMode,
    pub classes_per_head: usize,
    /// Widths after the first and second decoder stages.
    pub decoder_channels: [usize; 2],
    pub bn_eps: f64,
    /// Conv-BN pairs are folded into biased convolutions.
    pub fused: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            level2_channels: 80,
            p: 1,
            level3_channels: 180,
            q: 4,
            dilations: vec![1, 2, 4, 8, 16],
            encoder_channels: 32,
            attention: true,
            head_mode: HeadMode::TwoHeads,
            classes_per_head: 2,
            decoder_channels: [16, 8],
            bn_eps: 1e-3,
            fused: false,
        }
    }
}

impl ModelConfig {
    /// Encoder and one 3-class head, no attention.
    pub fn baseline() -> Self {
        Self {
            attention: false,
            head_mode: HeadMode::SingleHead,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q == 0 {
            return Err(Error::invalid(format!("p and q must be ≥ 1, got p={} q={}", self.p, self.q)));
        }
        for (what, v) in [
            ("in_channels", self.in_channels),
            ("stem_channels", self.stem_channels),
            ("encoder_channels", self.encoder_channels),
            ("decoder_channels[0]", self.decoder_channels[0]),
            ("decoder_channels[1]", self.decoder_channels[1]),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{what} must be ≥ 1")));
            }
        }
        if self.attention && !self.encoder_channels.is_multiple_of(8) {
            return Err(Error::invalid(format!(
                "encoder_channels {} must be divisible by 8 for position attention",
                self.encoder_channels
            )));
        }
        if self.head_mode == HeadMode::TwoHeads && self.classes_per_head < 2 {
            return Err(Error::invalid("classes_per_head must be ≥ 2"));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::invalid(format!("bn_eps must be > 0, got {}", self.bn_eps)));
        }
        for esp in self.esp_blocks() {
            esp.1.validate()?;
        }
        Ok(())
    }

    pub(crate) fn level2_in(&self) -> usize {
        self.stem_channels + self.in_channels
    }

    pub(crate) fn level3_in(&self) -> usize {
        2 * self.level2_channels + self.in_channels
    }

    pub(crate) fn project_in(&self) -> usize {
        2 * self.level3_channels
    }

    /// Every ESP block of the encoder with its parameter prefix, in forward order.
    pub fn esp_blocks(&self) -> Vec<(String, EspConfig)> {
        let esp = |cin, cout, stride| EspConfig {
            in_channels: cin,
            out_channels: cout,
            stride,
            dilations: self.dilations.clone(),
        };
        let mut out = vec![("encoder.level2_0".to_string(), esp(self.level2_in(), self.level2_channels, 2))];
        for i in 0..self.p {
            out.push((format!("encoder.level2.{i}"), esp(self.level2_channels, self.level2_channels, 1)));
        }
        out.push(("encoder.level3_0".to_string(), esp(self.level3_in(), self.level3_channels, 2)));
        for i in 0..self.q {
            out.push((format!("encoder.level3.{i}"), esp(self.level3_channels, self.level3_channels, 1)));
        }
        out
    }

    /// Conv (or transposed conv) + BN pairs that fusion folds, as `(prefix, transposed)`.
    pub fn fusable_units(&self) -> Vec<(String, bool)> {
        let mut out = vec![("encoder.level1".to_string(), false), ("encoder.project".to_string(), false)];
        if self.attention {
            out.push(("attention.fuse_pam".into(), false));
            out.push(("attention.fuse_cam".into(), false));
        }
        for (head, _) in self.heads() {
            out.push((format!("{head}.up1"), true));
            out.push((format!("{head}.up2"), true));
        }
        out
    }

    /// `(prefix, classes)` of each decoder head.
    pub fn heads(&self) -> Vec<(&'static str, usize)> {
        match self.head_mode {
            HeadMode::TwoHeads => vec![("da_head", self.classes_per_head), ("lane_head", self.classes_per_head)],
            HeadMode::SingleHead => vec![("seg_head", SINGLE_HEAD_CLASSES)],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::baseline().validate().unwrap();
    }

    #[test]
    fn esp_width_must_split_evenly() {
        assert!(EspConfig::new(16, 64, 1, &[1, 2, 4, 8, 16]).is_err());
        assert!(EspConfig::new(16, 65, 3, &[1, 2, 4, 8, 16]).is_err());
        let ok = EspConfig::new(80, 80, 1, &[1, 2, 4, 8, 16]).unwrap();
        assert!(ok.has_residual());
        assert_eq!(ok.branch_channels(), 16);
        assert!(!EspConfig::new(80, 80, 2, &[1, 2]).unwrap().has_residual());
    }

    #[test]
    fn repeat_counts_must_be_positive() {
        let cfg = ModelConfig { q: 0, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
