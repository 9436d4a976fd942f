use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{EspConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Learnable; receives gradients and counts toward the parameter total.
    Param,
    /// Running batch-norm statistics.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    pub init: Init,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub const PRELU_INIT: f64 = 0.25;

#[derive(Default)]
pub(crate) struct SchemaBuilder {
    specs: Vec<TensorSpec>,
    fused: bool,
}

impl SchemaBuilder {
    pub(crate) fn new(fused: bool) -> Self {
        Self {
            specs: Vec::new(),
            fused,
        }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, kind: TensorKind, init: Init) {
        self.specs.push(TensorSpec { name, shape, kind, init });
    }

    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.push(name, shape, TensorKind::Param, init);
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize, bias: bool) {
        self.param(format!("{prefix}.weight"), vec![cout, cin, k, k], Init::Kaiming { fan_in: cin * k * k });
        if bias {
            self.param(format!("{prefix}.bias"), vec![cout], Init::Constant(0.0));
        }
    }

    fn conv_t(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        self.param(format!("{prefix}.weight"), vec![cin, cout, k, k], Init::Kaiming { fan_in: cin });
        if bias {
            self.param(format!("{prefix}.bias"), vec![cout], Init::Constant(0.0));
        }
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        self.param(format!("{prefix}.bn.gamma"), vec![c], Init::Constant(1.0));
        self.param(format!("{prefix}.bn.beta"), vec![c], Init::Constant(0.0));
        self.push(format!("{prefix}.bn.running_mean"), vec![c], TensorKind::Buffer, Init::Constant(0.0));
        self.push(format!("{prefix}.bn.running_var"), vec![c], TensorKind::Buffer, Init::Constant(1.0));
    }

    fn act(&mut self, prefix: &str, c: usize) {
        self.param(format!("{prefix}.act.slope"), vec![c], Init::Constant(PRELU_INIT));
    }

    fn bn_act(&mut self, prefix: &str, c: usize) {
        self.bn(prefix, c);
        self.act(prefix, c);
    }

    /// Conv (`fusable`) + BN + PReLU. A fused unit is a biased conv + PReLU.
    fn conv_bn_act(&mut self, prefix: &str, cout: usize, cin: usize, k: usize) {
        self.conv(&format!("{prefix}.conv"), cout, cin, k, self.fused);
        if !self.fused {
            self.bn(prefix, cout);
        }
        self.act(prefix, cout);
    }

    fn conv_t_bn_act(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.conv_t(&format!("{prefix}.conv"), cin, cout, 2, self.fused);
        if !self.fused {
            self.bn(prefix, cout);
        }
        self.act(prefix, cout);
    }

    pub(crate) fn esp(&mut self, prefix: &str, cfg: &EspConfig) {
        let n = cfg.branch_channels();
        let k = if cfg.stride == 2 { 3 } else { 1 };
        self.conv(&format!("{prefix}.reduce"), n, cfg.in_channels, k, false);
        for i in 0..cfg.branches() {
            self.conv(&format!("{prefix}.branch{i}"), n, n, 3, false);
        }
        self.bn_act(prefix, cfg.out_channels);
    }

    fn model(&mut self, cfg: &ModelConfig) {
        self.conv_bn_act("encoder.level1", cfg.stem_channels, cfg.in_channels, 3);
        self.bn_act("encoder.b1", cfg.level2_in());
        let blocks = cfg.esp_blocks();
        let level3_start = 1 + cfg.p;
        for (prefix, esp) in &blocks[..level3_start] {
            self.esp(prefix, esp);
        }
        self.bn_act("encoder.b2", cfg.level3_in());
        for (prefix, esp) in &blocks[level3_start..] {
            self.esp(prefix, esp);
        }
        self.bn_act("encoder.b3", cfg.project_in());
        self.conv_bn_act("encoder.project", cfg.encoder_channels, cfg.project_in(), 1);

        if cfg.attention {
            let c = cfg.encoder_channels;
            self.conv("attention.pam.query", c / 8, c, 1, true);
            self.conv("attention.pam.key", c / 8, c, 1, true);
            self.conv("attention.pam.value", c, c, 1, true);
            self.param("attention.pam.scale".into(), vec![1], Init::Constant(0.0));
            self.param("attention.cam.scale".into(), vec![1], Init::Constant(0.0));
            self.conv_bn_act("attention.fuse_pam", c, c, 3);
            self.conv_bn_act("attention.fuse_cam", c, c, 3);
        }

        let [d1, d2] = cfg.decoder_channels;
        for (head, classes) in cfg.heads() {
            self.conv_t_bn_act(&format!("{head}.up1"), cfg.encoder_channels, d1);
            self.conv_t_bn_act(&format!("{head}.up2"), d1, d2);
            self.conv_t(&format!("{head}.classifier"), d2, classes, 2, true);
        }
    }

    pub(crate) fn finish(self) -> Vec<TensorSpec> {
        self.specs
    }
}

/// Every tensor a model with `cfg` owns, in forward order.
pub fn schema(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let mut b = SchemaBuilder::new(cfg.fused);
    b.model(cfg);
    b.finish()
}

/// Tensors of one standalone ESP block under `prefix`.
pub fn esp_schema(prefix: &str, cfg: &EspConfig) -> Vec<TensorSpec> {
    let mut b = SchemaBuilder::new(false);
    b.esp(prefix, cfg);
    b.finish()
}

/// Named parameters and batch-norm buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T: Element = f32> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Default for Weights<T> {
    fn default() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }
}

impl<T: Element> Weights<T> {
    /// Seeded initialization. Values are drawn in double precision, so a
    /// single-precision set is the rounding of the double one for the same seed.
    pub fn init(specs: &[TensorSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::default();
        for spec in specs {
            let t = match spec.init {
                Init::Kaiming { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                    Tensor::from_fn(&spec.shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))
                }
                Init::Constant(v) => Tensor::full(&spec.shape, T::from_f64_lossy(v)),
            };
            w.insert(spec, t);
        }
        w
    }

    fn insert(&mut self, spec: &TensorSpec, t: Tensor<T>) {
        match spec.kind {
            TensorKind::Param => self.params.insert(spec.name.clone(), t),
            TensorKind::Buffer => self.buffers.insert(spec.name.clone(), t),
        };
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).or_else(|| self.buffers.get(name)).ok_or_else(|| Error::WeightMismatch {
            name: name.to_string(),
            detail: "missing".into(),
        })
    }

    /// Checks that the set holds exactly the tensors of `specs`, naming the
    /// first mismatch in schema order.
    pub fn validate(&self, specs: &[TensorSpec]) -> Result<()> {
        for spec in specs {
            let (map, other) = match spec.kind {
                TensorKind::Param => (&self.params, &self.buffers),
                TensorKind::Buffer => (&self.buffers, &self.params),
            };
            let t = map.get(&spec.name).ok_or_else(|| Error::WeightMismatch {
                name: spec.name.clone(),
                detail: if other.contains_key(&spec.name) {
                    format!("expected a {:?}, stored as the other kind", spec.kind)
                } else {
                    "missing".into()
                },
            })?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::WeightMismatch {
                    name: spec.name.clone(),
                    detail: format!("expected shape {:?}, found {:?}", spec.shape, t.shape()),
                });
            }
        }
        let expected = specs.iter().filter(|s| s.kind == TensorKind::Param).count()
            + specs.iter().filter(|s| s.kind == TensorKind::Buffer).count();
        if self.params.len() + self.buffers.len() != expected {
            let known: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra = self
                .params
                .keys()
                .chain(self.buffers.keys())
                .find(|k| !known.contains(k.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(Error::WeightMismatch {
                name: extra,
                detail: "not part of the model".into(),
            });
        }
        Ok(())
    }

    /// Learnable scalar count; running statistics are excluded.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> Weights<U> {
        Weights {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}
