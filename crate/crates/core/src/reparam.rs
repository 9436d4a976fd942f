//! Folding inference-mode batch norm into the preceding convolution.

use crate::error::{Error, Result};
use crate::nn::{Model, Mode};
use crate::tensor::{Element, Tensor};

/// A convolution with batch norm folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedConv<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Batch-norm parameters and running statistics of one layer.
#[derive(Debug, Clone, Copy)]
pub struct BnParams<'a, T: Element> {
    pub gamma: &'a Tensor<T>,
    pub beta: &'a Tensor<T>,
    pub mean: &'a Tensor<T>,
    pub var: &'a Tensor<T>,
    pub eps: f64,
}

/// Which weight axis indexes output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvLayout {
    /// `[Cout, Cin/groups, Kh, Kw]`.
    Conv,
    /// `[Cin, Cout, Kh, Kw]`.
    Transposed,
}

/// `s = γ/√(var+eps)`, `w' = w·s` per output channel, `b' = (b − mean)·s + β`.
pub fn fuse_conv_bn<T: Element>(
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    bn: BnParams<'_, T>,
    layout: ConvLayout,
) -> Result<FusedConv<T>> {
    if weight.rank() != 4 {
        return Err(Error::shape("fuse_conv_bn", format!("weight must be 4-D, got {:?}", weight.shape())));
    }
    let axis = match layout {
        ConvLayout::Conv => 0,
        ConvLayout::Transposed => 1,
    };
    let cout = weight.shape()[axis];
    for (what, t) in [("gamma", bn.gamma), ("beta", bn.beta), ("mean", bn.mean), ("var", bn.var)]
        .into_iter()
        .chain(bias.map(|b| ("bias", b)))
    {
        if t.shape() != [cout] {
            return Err(Error::shape(
                "fuse_conv_bn",
                format!("{what} has shape {:?}, conv has {cout} output channels", t.shape()),
            ));
        }
    }
    if bn.eps < 0.0 {
        return Err(Error::invalid(format!("eps must be ≥ 0, got {}", bn.eps)));
    }
    let scale: Vec<f64> = (0..cout)
        .map(|o| bn.gamma.data()[o].as_f64() / (bn.var.data()[o].as_f64() + bn.eps).sqrt())
        .collect();
    let fused_bias: Vec<T> = (0..cout)
        .map(|o| {
            let b = bias.map_or(0.0, |b| b.data()[o].as_f64());
            T::from_f64_lossy((b - bn.mean.data()[o].as_f64()) * scale[o] + bn.beta.data()[o].as_f64())
        })
        .collect();
    let inner: usize = weight.shape()[axis + 1..].iter().product();
    let mut w = weight.clone();
    for (i, chunk) in w.data_mut().chunks_mut(inner).enumerate() {
        let o = i % cout;
        let s = scale[o];
        chunk.iter_mut().for_each(|v| *v = T::from_f64_lossy(v.as_f64() * s));
    }
    Ok(FusedConv {
        weight: w,
        bias: Tensor::new(vec![cout], fused_bias)?,
    })
}

/// Returns an inference model with every conv→BN and transposed-conv→BN pair
/// folded. A model that is already fused is returned unchanged.
pub fn fuse_model<T: Element>(model: &Model<T>) -> Result<Model<T>> {
    if model.mode() == Mode::Train {
        return Err(Error::invalid("fusion requires an eval-mode model with finalized running statistics"));
    }
    let cfg = model.config();
    if cfg.fused {
        return Ok(model.clone());
    }
    let mut weights = model.weights().clone();
    for (prefix, transposed) in cfg.fusable_units() {
        let take_param = |w: &mut crate::nn::Weights<T>, name: String| {
            w.params.remove(&name).ok_or(Error::WeightMismatch {
                name,
                detail: "missing".into(),
            })
        };
        let take_buffer = |w: &mut crate::nn::Weights<T>, name: String| {
            w.buffers.remove(&name).ok_or(Error::WeightMismatch {
                name,
                detail: "missing".into(),
            })
        };
        let conv_w = take_param(&mut weights, format!("{prefix}.conv.weight"))?;
        let gamma = take_param(&mut weights, format!("{prefix}.bn.gamma"))?;
        let beta = take_param(&mut weights, format!("{prefix}.bn.beta"))?;
        let mean = take_buffer(&mut weights, format!("{prefix}.bn.running_mean"))?;
        let var = take_buffer(&mut weights, format!("{prefix}.bn.running_var"))?;
        let layout = if transposed { ConvLayout::Transposed } else { ConvLayout::Conv };
        let bn = BnParams {
            gamma: &gamma,
            beta: &beta,
            mean: &mean,
            var: &var,
            eps: cfg.bn_eps,
        };
        let fused = fuse_conv_bn(&conv_w, None, bn, layout)?;
        weights.params.insert(format!("{prefix}.conv.weight"), fused.weight);
        weights.params.insert(format!("{prefix}.conv.bias"), fused.bias);
    }
    let mut fused_cfg = cfg.clone();
    fused_cfg.fused = true;
    Model::from_weights(fused_cfg, weights, Mode::Eval)
}
