//! Binary checkpoint: `"TWLT"`, version (u32 LE), tensor count (u32 LE), then
//! per tensor the name length (u32) and UTF-8 name, rank (u32), dims (u32
//! each) and raw f32 LE values.
//!
//! Names are `param.<name>`, `buffer.<name>`, `optim.m.<name>`,
//! `optim.v.<name>`, `optim.step`, `meta.config` and `meta.input_size`.

use std::collections::BTreeMap;
use std::path::Path;

use super::OptimState;
use crate::error::{Error, Result};
use crate::nn::{HeadMode, Model, ModelConfig, Mode, Weights};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TWLT";
pub const CHECKPOINT_VERSION: u32 = 1;

const CONFIG_FIELDS: usize = 15;

/// Everything a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optim: Option<OptimState<f32>>,
    /// `(width, height)` the model was trained at.
    pub input_size: Option<(usize, usize)>,
}

fn encode_config(cfg: &ModelConfig) -> Vec<f32> {
    let mut v = vec![
        cfg.in_channels as f32,
        cfg.stem_channels as f32,
        cfg.level2_channels as f32,
        cfg.p as f32,
        cfg.level3_channels as f32,
        cfg.q as f32,
        cfg.encoder_channels as f32,
        cfg.attention as u8 as f32,
        match cfg.head_mode {
            HeadMode::TwoHeads => 0.0,
            HeadMode::SingleHead => 1.0,
        },
        cfg.classes_per_head as f32,
        cfg.decoder_channels[0] as f32,
        cfg.decoder_channels[1] as f32,
        cfg.bn_eps as f32,
        cfg.fused as u8 as f32,
        cfg.dilations.len() as f32,
    ];
    debug_assert_eq!(v.len(), CONFIG_FIELDS);
    v.extend(cfg.dilations.iter().map(|&d| d as f32));
    v
}

fn decode_config(v: &[f32], offset: usize) -> Result<ModelConfig> {
    let bad = |detail: String| Error::Checkpoint { offset, detail };
    if v.len() < CONFIG_FIELDS {
        return Err(bad(format!("meta.config holds {} values, expected at least {CONFIG_FIELDS}", v.len())));
    }
    let count = |i: usize| -> Result<usize> {
        let x = v[i];
        if x >= 0.0 && x.fract() == 0.0 && x < 16_777_216.0 {
            Ok(x as usize)
        } else {
            Err(bad(format!("meta.config field {i} is not a count: {x}")))
        }
    };
    let flag = |i: usize| -> Result<bool> {
        match count(i)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(bad(format!("meta.config field {i} is not a flag: {other}"))),
        }
    };
    let n_dil = count(14)?;
    if v.len() != CONFIG_FIELDS + n_dil {
        return Err(bad(format!("meta.config holds {} values, expected {}", v.len(), CONFIG_FIELDS + n_dil)));
    }
    // Shortest decimal form of the stored single-precision value.
    let bn_eps: f64 = format!("{}", v[12]).parse().map_err(|_| bad("meta.config bn_eps unreadable".into()))?;
    let cfg = ModelConfig {
        in_channels: count(0)?,
        stem_channels: count(1)?,
        level2_channels: count(2)?,
        p: count(3)?,
        level3_channels: count(4)?,
        q: count(5)?,
        encoder_channels: count(6)?,
        attention: flag(7)?,
        head_mode: if flag(8)? { HeadMode::SingleHead } else { HeadMode::TwoHeads },
        classes_per_head: count(9)?,
        decoder_channels: [count(10)?, count(11)?],
        bn_eps,
        fused: flag(13)?,
        dilations: (0..n_dil).map(|i| count(CONFIG_FIELDS + i)).collect::<Result<_>>()?,
    };
    cfg.validate().map_err(|e| bad(format!("meta.config invalid: {e}")))?;
    Ok(cfg)
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit the checkpoint's u32 fields")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_u32(buf, name.len())?;
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.rank())?;
    for &d in t.shape() {
        put_u32(buf, d)?;
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn vector(values: Vec<f32>) -> Tensor<f32> {
    let n = values.len();
    Tensor::new(vec![n], values).expect("non-empty vector")
}

/// Serializes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let w = ckpt.model.weights();
    let mut entries: Vec<(String, &Tensor<f32>)> = Vec::new();
    let config = vector(encode_config(ckpt.model.config()));
    entries.push(("meta.config".into(), &config));
    let size = ckpt.input_size.map(|(w, h)| vector(vec![w as f32, h as f32]));
    if let Some(s) = &size {
        entries.push(("meta.input_size".into(), s));
    }
    entries.extend(w.params.iter().map(|(k, v)| (format!("param.{k}"), v)));
    entries.extend(w.buffers.iter().map(|(k, v)| (format!("buffer.{k}"), v)));
    let step;
    if let Some(o) = &ckpt.optim {
        entries.extend(o.m.iter().map(|(k, v)| (format!("optim.m.{k}"), v)));
        entries.extend(o.v.iter().map(|(k, v)| (format!("optim.v.{k}"), v)));
        if o.step >= 1 << 24 {
            return Err(Error::invalid("optimizer step count exceeds the exact f32 range"));
        }
        step = Tensor::scalar(o.step as f32);
        entries.push(("optim.step".into(), &step));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION as usize)?;
    put_u32(&mut buf, entries.len())?;
    for (name, t) in entries {
        put_tensor(&mut buf, &name, t)?;
    }
    Ok(buf)
}

/// Writes via a temporary file and rename, so readers never see a partial file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.pos,
                detail: format!("truncated: {what} needs {n} bytes, {} remain", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a checkpoint; nothing is returned unless the whole file is valid.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            detail: "bad magic (not a checkpoint file)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint {
            offset: 4,
            detail: format!("unsupported version {version} (expected {CHECKPOINT_VERSION})"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut tensors: BTreeMap<String, (usize, Tensor<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint {
                offset: start + 4,
                detail: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")?;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint {
                offset: r.pos - 4,
                detail: format!("tensor `{name}` has unsupported rank {rank}"),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")?);
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n > 0);
        let data_at = r.pos;
        let numel = numel.ok_or_else(|| Error::Checkpoint {
            offset: data_at,
            detail: format!("tensor `{name}` has invalid dims {dims:?}"),
        })?;
        let raw = r.take(numel.saturating_mul(4), &format!("data of `{name}`"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(dims, data).expect("dims validated");
        if tensors.insert(name.clone(), (start, t)).is_some() {
            return Err(Error::Checkpoint {
                offset: start,
                detail: format!("duplicate tensor `{name}`"),
            });
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint {
            offset: r.pos,
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }

    let (cfg_at, cfg_t) = tensors.remove("meta.config").ok_or(Error::Checkpoint {
        offset: bytes.len(),
        detail: "missing meta.config".into(),
    })?;
    let config = decode_config(cfg_t.data(), cfg_at)?;
    let input_size = match tensors.remove("meta.input_size") {
        None => None,
        Some((at, t)) => match t.data() {
            &[w, h] if w >= 1.0 && h >= 1.0 && w.fract() == 0.0 && h.fract() == 0.0 => Some((w as usize, h as usize)),
            _ => {
                return Err(Error::Checkpoint {
                    offset: at,
                    detail: "meta.input_size must hold two positive integers".into(),
                })
            }
        },
    };

    let mut weights = Weights::default();
    let mut optim = OptimState::default();
    let mut has_optim = false;
    for (name, (at, t)) in tensors {
        if let Some(k) = name.strip_prefix("param.") {
            weights.params.insert(k.to_string(), t);
        } else if let Some(k) = name.strip_prefix("buffer.") {
            weights.buffers.insert(k.to_string(), t);
        } else if let Some(k) = name.strip_prefix("optim.m.") {
            optim.m.insert(k.to_string(), t);
            has_optim = true;
        } else if let Some(k) = name.strip_prefix("optim.v.") {
            optim.v.insert(k.to_string(), t);
            has_optim = true;
        } else if name == "optim.step" {
            let s = t.data()[0];
            if t.numel() != 1 || s < 0.0 || s.fract() != 0.0 {
                return Err(Error::Checkpoint {
                    offset: at,
                    detail: "optim.step must be one non-negative integer".into(),
                });
            }
            optim.step = s as u64;
            has_optim = true;
        } else {
            return Err(Error::Checkpoint {
                offset: at,
                detail: format!("unknown tensor `{name}`"),
            });
        }
    }
    if has_optim {
        for (name, p) in &weights.params {
            for (which, map) in [("m", &optim.m), ("v", &optim.v)] {
                if let Some(t) = map.get(name) {
                    if t.shape() != p.shape() {
                        return Err(Error::WeightMismatch {
                            name: format!("optim.{which}.{name}"),
                            detail: format!("shape {:?} vs parameter {:?}", t.shape(), p.shape()),
                        });
                    }
                }
            }
        }
        if let Some(k) = optim.m.keys().chain(optim.v.keys()).find(|k| !weights.params.contains_key(*k)) {
            return Err(Error::WeightMismatch {
                name: k.clone(),
                detail: "optimizer state for unknown parameter".into(),
            });
        }
    }
    let model = Model::from_weights(config, weights, Mode::Eval)?;
    Ok(Checkpoint {
        model,
        optim: has_optim.then_some(optim),
        input_size,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
