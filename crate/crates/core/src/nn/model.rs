use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::graph::{Graph, HeadOutputs, NamedBatchStats};
use super::schema::{schema, Weights};
use crate::error::{Error, Result};
use crate::grad::{compare_central_differences, GradCheckReport, Tape, Var};
use crate::loss::LossConfig;
use crate::tensor::{BatchStats, BnMode, DType, Element, RunningStats, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses batch statistics; running statistics may be updated.
    Train,
    /// Batch norm uses running statistics.
    Eval,
}

impl Mode {
    pub fn bn_mode(self) -> BnMode {
        match self {
            Mode::Train => BnMode::Training,
            Mode::Eval => BnMode::Inference,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element = f32> {
    config: ModelConfig,
    weights: Weights<T>,
    mode: Mode,
}

/// Handles produced by one recorded forward pass.
pub struct ForwardPass<T: Element> {
    pub outputs: HeadOutputs<Var>,
    pub params: BTreeMap<String, Var>,
    /// Training-mode statistics keyed by batch-norm prefix (`….bn`).
    pub bn_stats: NamedBatchStats<T>,
}

/// One-hot targets matching the head layout.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T: Element> {
    Two { da: Tensor<T>, lane: Tensor<T> },
    Single(Tensor<T>),
}

/// Loss handles; the per-head terms are absent in single-head mode.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub da: Option<Var>,
    pub lane: Option<Var>,
}

impl<T: Element> Model<T> {
    /// Freshly initialized model in training mode.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&schema(&config), seed);
        Ok(Self {
            config,
            weights,
            mode: Mode::Train,
        })
    }

    pub fn from_weights(config: ModelConfig, weights: Weights<T>, mode: Mode) -> Result<Self> {
        config.validate()?;
        weights.validate(&schema(&config))?;
        Ok(Self { config, weights, mode })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights<T> {
        &self.weights
    }

    /// Mutable access for optimizers. Shapes must be preserved.
    pub fn weights_mut(&mut self) -> &mut Weights<T> {
        &mut self.weights
    }

    pub fn into_parts(self) -> (ModelConfig, Weights<T>, Mode) {
        (self.config, self.weights, self.mode)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            weights: self.weights.cast(),
            mode: self.mode,
        }
    }

    /// Records a forward pass of `image` on `tape`, with batch norm per the model mode.
    pub fn forward(&self, tape: &mut Tape<T>, image: Var) -> Result<ForwardPass<T>> {
        self.forward_with(tape, image, self.mode.bn_mode())
    }

    fn forward_with(&self, tape: &mut Tape<T>, image: Var, bn: BnMode) -> Result<ForwardPass<T>> {
        let mut g = Graph::new(tape, &self.weights, bn, self.config.bn_eps, self.config.fused);
        let outputs = g.model(image, &self.config)?;
        let (params, bn_stats) = g.into_parts();
        Ok(ForwardPass {
            outputs,
            params,
            bn_stats,
        })
    }

    /// Inference-mode logits for `image` (`[N, C, H, W]`), whatever the model mode.
    pub fn infer(&self, image: &Tensor<T>) -> Result<HeadOutputs<Tensor<T>>> {
        let mut tape = Tape::inference();
        let x = tape.leaf(image.clone());
        let pass = self.forward_with(&mut tape, x, BnMode::Inference)?;
        Ok(pass.outputs.map(|v| tape.value(v).clone()))
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<T>)], momentum: f64) -> Result<()> {
        for (prefix, batch) in stats {
            let mean_key = format!("{prefix}.running_mean");
            let var_key = format!("{prefix}.running_var");
            let missing = |name: &str| Error::WeightMismatch {
                name: name.to_string(),
                detail: "missing".into(),
            };
            let mut running = RunningStats {
                mean: self.weights.buffers.get(&mean_key).ok_or_else(|| missing(&mean_key))?.clone(),
                var: self.weights.buffers.get(&var_key).ok_or_else(|| missing(&var_key))?.clone(),
            };
            running.update(batch, momentum);
            self.weights.buffers.insert(mean_key, running.mean);
            self.weights.buffers.insert(var_key, running.var);
        }
        Ok(())
    }
}

/// Per-head focal + Tversky on softmax probabilities; heads weighted 1:1.
pub fn model_loss_on_tape<T: Element>(
    tape: &mut Tape<T>,
    outputs: HeadOutputs<Var>,
    targets: &Targets<T>,
    cfg: &LossConfig,
) -> Result<LossVars> {
    match (outputs, targets) {
        (HeadOutputs::Two { da, lane }, Targets::Two { da: tda, lane: tlane }) => {
            let pd = tape.softmax_channels(da)?;
            let ld = tape.head_loss(pd, tda, cfg)?;
            let pl = tape.softmax_channels(lane)?;
            let ll = tape.head_loss(pl, tlane, cfg)?;
            Ok(LossVars {
                total: tape.add(ld, ll)?,
                da: Some(ld),
                lane: Some(ll),
            })
        }
        (HeadOutputs::Single(seg), Targets::Single(t)) => {
            let p = tape.softmax_channels(seg)?;
            Ok(LossVars {
                total: tape.head_loss(p, t, cfg)?,
                da: None,
                lane: None,
            })
        }
        (HeadOutputs::Two { .. }, Targets::Single(_)) => Err(Error::invalid("two-head model given single-head targets")),
        (HeadOutputs::Single(_), Targets::Two { .. }) => Err(Error::invalid("single-head model given two-head targets")),
    }
}

fn loss_value<T: Element>(model: &Model<T>, image: &Tensor<T>, targets: &Targets<T>, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::inference();
    let x = tape.leaf(image.clone());
    let pass = model.forward(&mut tape, x)?;
    let loss = model_loss_on_tape(&mut tape, pass.outputs, targets, cfg)?;
    Ok(tape.value(loss.total).item().as_f64())
}

/// Finite-difference check of the whole-model loss against `samples`
/// parameter coordinates and `samples` input coordinates, drawn from `seed`.
pub fn gradcheck_model<T: Element>(
    model: &Model<T>,
    image: &Tensor<T>,
    targets: &Targets<T>,
    cfg: &LossConfig,
    samples: usize,
    seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    if T::DTYPE != DType::Double {
        return Err(Error::Precision("gradcheck_model"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone());
    let pass = model.forward(&mut tape, x)?;
    let loss = model_loss_on_tape(&mut tape, pass.outputs, targets, cfg)?;
    let grads = tape.backward(loss.total)?;

    // Coordinates: (Some(param name), offset) or (None, input offset).
    let mut coords: Vec<(Option<&str>, usize)> = Vec::new();
    let mut analytic = Vec::new();
    let flat: Vec<(&str, usize)> = model
        .weights
        .params
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.as_str(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in rand::seq::index::sample(&mut rng, flat.len(), samples.min(flat.len())) {
        let (name, off) = flat[i];
        let g = pass.params.get(name).and_then(|&v| grads.get(v));
        analytic.push(g.map_or(0.0, |g| g.data()[off].as_f64()));
        coords.push((Some(name), off));
    }
    let gx = grads.get_or_zeros(x, &tape);
    for off in rand::seq::index::sample(&mut rng, image.numel(), samples.min(image.numel())) {
        analytic.push(gx.data()[off].as_f64());
        coords.push((None, off));
    }

    let indices: Vec<usize> = (0..coords.len()).collect();
    let mut probe = model.clone();
    compare_central_differences("model_loss", &indices, |i| analytic[i], h, |i, delta| {
        let d = T::from_f64_lossy(delta);
        match coords[i] {
            (Some(name), off) => {
                let p = probe.weights.params.get_mut(name).expect("sampled from params");
                let orig = p.data()[off];
                p.data_mut()[off] = orig + d;
                let v = loss_value(&probe, image, targets, cfg);
                probe.weights.params.get_mut(name).expect("sampled from params").data_mut()[off] = orig;
                v
            }
            (None, off) => {
                let mut shifted = image.clone();
                shifted.data_mut()[off] += d;
                loss_value(&probe, &shifted, targets, cfg)
            }
        }
    })
}
