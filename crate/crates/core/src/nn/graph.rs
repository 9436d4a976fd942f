use std::collections::BTreeMap;

use super::config::{EspConfig, ModelConfig};
use super::schema::Weights;
use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::tensor::{BatchStats, BnMode, ConvParams, Element, RunningStats, Transposed};

/// Training-mode batch statistics keyed by batch-norm prefix, in forward order.
pub type NamedBatchStats<T> = Vec<(String, BatchStats<T>)>;

/// Logit handles of the decoder heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadOutputs<V> {
    Two { da: V, lane: V },
    Single(V),
}

impl<V: Copy> HeadOutputs<V> {
    pub fn map<U>(self, mut f: impl FnMut(V) -> U) -> HeadOutputs<U> {
        match self {
            HeadOutputs::Two { da, lane } => HeadOutputs::Two { da: f(da), lane: f(lane) },
            HeadOutputs::Single(x) => HeadOutputs::Single(f(x)),
        }
    }

    pub fn try_map<U>(self, mut f: impl FnMut(V) -> Result<U>) -> Result<HeadOutputs<U>> {
        Ok(match self {
            HeadOutputs::Two { da, lane } => HeadOutputs::Two { da: f(da)?, lane: f(lane)? },
            HeadOutputs::Single(x) => HeadOutputs::Single(f(x)?),
        })
    }
}

/// Intermediate handles of the attention stage.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace {
    pub pam_out: Var,
    pub cam_out: Var,
    /// `[N, hw, hw]`, rows over key positions.
    pub pam_attention: Var,
    /// `[N, C, C]`.
    pub cam_attention: Var,
    pub fused: Var,
}

/// Records a forward pass on a tape, binding parameters as leaves on first use.
pub struct Graph<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    weights: &'a Weights<T>,
    bn_mode: BnMode,
    eps: f64,
    fused: bool,
    params: BTreeMap<String, Var>,
    bn_stats: NamedBatchStats<T>,
}

impl<'a, T: Element> Graph<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, weights: &'a Weights<T>, bn_mode: BnMode, eps: f64, fused: bool) -> Self {
        Self {
            tape,
            weights,
            bn_mode,
            eps,
            fused,
            params: BTreeMap::new(),
            bn_stats: Vec::new(),
        }
    }

    /// Parameter handles bound so far.
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// `(bn prefix, batch statistics)` of every training-mode batch norm, in forward order.
    pub fn into_parts(self) -> (BTreeMap<String, Var>, NamedBatchStats<T>) {
        (self.params, self.bn_stats)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = self.weights.params.get(name).ok_or_else(|| Error::WeightMismatch {
            name: name.to_string(),
            detail: "missing".into(),
        })?;
        let v = self.tape.leaf(t.clone());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn buffer(&self, name: &str) -> Result<crate::tensor::Tensor<T>> {
        self.weights.buffers.get(name).cloned().ok_or_else(|| Error::WeightMismatch {
            name: name.to_string(),
            detail: "missing".into(),
        })
    }

    pub fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.bn.gamma"))?;
        let beta = self.param(&format!("{prefix}.bn.beta"))?;
        match self.bn_mode {
            BnMode::Training => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta, self.eps)?;
                self.bn_stats.push((format!("{prefix}.bn"), stats));
                Ok(y)
            }
            BnMode::Inference => {
                let stats = RunningStats {
                    mean: self.buffer(&format!("{prefix}.bn.running_mean"))?,
                    var: self.buffer(&format!("{prefix}.bn.running_var"))?,
                };
                self.tape.batch_norm_eval(x, gamma, beta, &stats, self.eps)
            }
        }
    }

    /// PReLU on a value nothing else reads.
    pub fn act(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let slope = self.param(&format!("{prefix}.act.slope"))?;
        self.tape.prelu_consume(x, slope)
    }

    pub fn bn_act(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let y = self.bn(x, prefix)?;
        self.act(y, prefix)
    }

    fn conv(&mut self, x: Var, prefix: &str, bias: bool, params: ConvParams) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = if bias { Some(self.param(&format!("{prefix}.bias"))?) } else { None };
        self.tape.conv2d(x, w, b, params)
    }

    fn conv_t(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = if bias { Some(self.param(&format!("{prefix}.bias"))?) } else { None };
        self.tape.conv_transpose2d(x, w, b, 2)
    }

    /// Conv + BN + PReLU, or biased conv + PReLU once fused.
    pub fn conv_bn_act(&mut self, x: Var, prefix: &str, params: ConvParams) -> Result<Var> {
        let y = self.conv(x, &format!("{prefix}.conv"), self.fused, params)?;
        let y = if self.fused { y } else { self.bn(y, prefix)? };
        self.act(y, prefix)
    }

    fn conv_t_bn_act(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let y = self.conv_t(x, &format!("{prefix}.conv"), self.fused)?;
        let y = if self.fused { y } else { self.bn(y, prefix)? };
        self.act(y, prefix)
    }

    /// Raw outputs of the reduce conv and each dilated branch.
    pub fn esp_branches(&mut self, x: Var, prefix: &str, cfg: &EspConfig) -> Result<Vec<Var>> {
        cfg.validate()?;
        let c = self.tape.shape(x).get(1).copied().unwrap_or(0);
        if c != cfg.in_channels {
            return Err(Error::shape(
                "esp",
                format!("{prefix}: input has {c} channels, block expects {}", cfg.in_channels),
            ));
        }
        let reduce = if cfg.stride == 2 { ConvParams::new(2, 1, 1) } else { ConvParams::default() };
        let r = self.conv(x, &format!("{prefix}.reduce"), false, reduce)?;
        cfg.dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| self.conv(r, &format!("{prefix}.branch{i}"), false, ConvParams::same(3, d)))
            .collect()
    }

    /// Reduce, dilated branches, hierarchical fusion (running sums in
    /// dilation order), concat, optional residual, BN + PReLU.
    pub fn esp(&mut self, x: Var, prefix: &str, cfg: &EspConfig) -> Result<Var> {
        let branches = self.esp_branches(x, prefix, cfg)?;
        let mut fused = Vec::with_capacity(branches.len());
        let mut acc = branches[0];
        fused.push(acc);
        for &b in &branches[1..] {
            acc = self.tape.add(acc, b)?;
            fused.push(acc);
        }
        let mut y = self.tape.concat_channels(&fused)?;
        if cfg.has_residual() {
            y = self.tape.add(y, x)?;
        }
        self.bn_act(y, prefix)
    }

    /// Feature map `A`: `[N, encoder_channels, H/8, W/8]`.
    pub fn encoder(&mut self, image: Var, cfg: &ModelConfig) -> Result<Var> {
        let shape = self.tape.shape(image).to_vec();
        let [_, c, h, w] = shape[..] else {
            return Err(Error::shape("encoder", format!("expected [N, C, H, W], got {shape:?}")));
        };
        if c != cfg.in_channels {
            return Err(Error::shape("encoder", format!("expected {} input channels, got {c}", cfg.in_channels)));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::shape(
                "encoder",
                format!(
                    "input {w}x{h} is not divisible by 8; resize to {}x{} or {}x{}",
                    w / 8 * 8,
                    h / 8 * 8,
                    w.div_ceil(8) * 8,
                    h.div_ceil(8) * 8
                ),
            ));
        }
        let l1 = self.conv_bn_act(image, "encoder.level1", ConvParams::new(2, 1, 1))?;
        let inp1 = self.tape.avg_pool2d(image, 2, 2)?;
        let inp2 = self.tape.avg_pool2d(inp1, 2, 2)?;
        let cat = self.tape.concat_channels(&[l1, inp1])?;
        let b1 = self.bn_act(cat, "encoder.b1")?;

        let blocks = cfg.esp_blocks();
        let (level2, level3) = blocks.split_at(1 + cfg.p);
        let l2_0 = self.esp(b1, &level2[0].0, &level2[0].1)?;
        let mut out = l2_0;
        for (prefix, esp) in &level2[1..] {
            out = self.esp(out, prefix, esp)?;
        }
        let cat = self.tape.concat_channels(&[out, l2_0, inp2])?;
        let b2 = self.bn_act(cat, "encoder.b2")?;

        let l3_0 = self.esp(b2, &level3[0].0, &level3[0].1)?;
        let mut out = l3_0;
        for (prefix, esp) in &level3[1..] {
            out = self.esp(out, prefix, esp)?;
        }
        let cat = self.tape.concat_channels(&[l3_0, out])?;
        let b3 = self.bn_act(cat, "encoder.b3")?;
        self.conv_bn_act(b3, "encoder.project", ConvParams::default())
    }

    fn flatten_spatial(&mut self, x: Var) -> Result<(Var, [usize; 4])> {
        let s = self.tape.shape(x);
        let dims = [s[0], s[1], s[2], s[3]];
        let flat = self.tape.reshape(x, &[dims[0], dims[1], dims[2] * dims[3]])?;
        Ok((flat, dims))
    }

    /// Position attention. Returns `(output, attention)`.
    pub fn pam(&mut self, a: Var) -> Result<(Var, Var)> {
        let q = self.conv(a, "attention.pam.query", true, ConvParams::default())?;
        let k = self.conv(a, "attention.pam.key", true, ConvParams::default())?;
        let v = self.conv(a, "attention.pam.value", true, ConvParams::default())?;
        let (q, _) = self.flatten_spatial(q)?;
        let (k, _) = self.flatten_spatial(k)?;
        let (v, dims) = self.flatten_spatial(v)?;
        let energy = self.tape.bmm_t(q, k, Transposed { a: true, b: false })?;
        let attention = self.tape.softmax_last_consume(energy)?;
        let out = self.tape.bmm_t(v, attention, Transposed { a: false, b: true })?;
        let out = self.tape.reshape(out, &dims)?;
        let scale = self.param("attention.pam.scale")?;
        let out = self.tape.scale_by(out, scale)?;
        Ok((self.tape.add(out, a)?, attention))
    }

    /// Channel attention with the `rowmax − energy` softmax. Returns `(output, attention)`.
    pub fn cam(&mut self, a: Var) -> Result<(Var, Var)> {
        let (flat, dims) = self.flatten_spatial(a)?;
        let energy = self.tape.bmm_t(flat, flat, Transposed { a: false, b: true })?;
        let shifted = self.tape.neg_shift_rowmax(energy)?;
        let attention = self.tape.softmax_last_consume(shifted)?;
        let out = self.tape.bmm(attention, flat)?;
        let out = self.tape.reshape(out, &dims)?;
        let scale = self.param("attention.cam.scale")?;
        let out = self.tape.scale_by(out, scale)?;
        Ok((self.tape.add(out, a)?, attention))
    }

    /// `B = branch_pam(pam_out) + branch_cam(cam_out)`, each branch a 3×3 conv + BN + PReLU.
    pub fn attention_fuse(&mut self, pam_out: Var, cam_out: Var) -> Result<Var> {
        if self.tape.shape(pam_out) != self.tape.shape(cam_out) {
            return Err(Error::shape(
                "attention_fuse",
                format!("{:?} vs {:?}", self.tape.shape(pam_out), self.tape.shape(cam_out)),
            ));
        }
        let p = self.conv_bn_act(pam_out, "attention.fuse_pam", ConvParams::same(3, 1))?;
        let c = self.conv_bn_act(cam_out, "attention.fuse_cam", ConvParams::same(3, 1))?;
        self.tape.add(p, c)
    }

    pub fn attention(&mut self, a: Var) -> Result<AttentionTrace> {
        let (pam_out, pam_attention) = self.pam(a)?;
        let (cam_out, cam_attention) = self.cam(a)?;
        let fused = self.attention_fuse(pam_out, cam_out)?;
        Ok(AttentionTrace {
            pam_out,
            cam_out,
            pam_attention,
            cam_attention,
            fused,
        })
    }

    /// Three stride-2 transposed-conv stages; the last emits raw logits.
    pub fn decoder(&mut self, b: Var, prefix: &str) -> Result<Var> {
        let y = self.conv_t_bn_act(b, &format!("{prefix}.up1"))?;
        let y = self.conv_t_bn_act(y, &format!("{prefix}.up2"))?;
        self.conv_t(y, &format!("{prefix}.classifier"), true)
    }

    pub fn model(&mut self, image: Var, cfg: &ModelConfig) -> Result<HeadOutputs<Var>> {
        let a = self.encoder(image, cfg)?;
        let b = if cfg.attention { self.attention(a)?.fused } else { a };
        let heads = cfg.heads();
        Ok(match heads[..] {
            [(da, _), (lane, _)] => HeadOutputs::Two {
                da: self.decoder(b, da)?,
                lane: self.decoder(b, lane)?,
            },
            [(seg, _)] => HeadOutputs::Single(self.decoder(b, seg)?),
            _ => unreachable!("head modes define one or two heads"),
        })
    }
}
