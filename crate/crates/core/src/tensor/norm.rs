use super::{ensure_channel_vector, ensure_same_shape, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running statistics.
    Training,
    /// Normalize with the running statistics only.
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            momentum: 0.1,
        }
    }
}

/// Per-channel running mean and variance, owned by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Element> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }

    /// `stat ← (1 − momentum)·stat + momentum·batch`, with the unbiased batch variance.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: f64) {
        let m = T::from_f64_lossy(momentum);
        let keep = T::one() - m;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(&batch.unbiased_var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Statistics of one training-mode batch-norm application.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance used for normalization, stored as `1/sqrt(var + eps)`.
    pub inv_std: Vec<T>,
    pub unbiased_var: Vec<T>,
}

fn check<T: Element>(op: &'static str, input: &Tensor<T>, vectors: &[(&str, &Tensor<T>)]) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4(op)?;
    for (what, t) in vectors {
        ensure_channel_vector(op, what, t, c)?;
    }
    Ok((n, c, h * w))
}

/// Training-mode normalization over `N, H, W` per channel.
pub fn batch_norm_train<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    if eps <= 0.0 {
        return Err(Error::invalid(format!("batch norm eps must be > 0, got {eps}")));
    }
    let (n, c, p) = check("batch_norm", input, &[("gamma", gamma), ("beta", beta)])?;
    let count = n * p;
    let cnt = T::from_usize(count).unwrap();
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    let mut stats = BatchStats {
        mean: vec![T::zero(); c],
        inv_std: vec![T::zero(); c],
        unbiased_var: vec![T::zero(); c],
    };
    for ch in 0..c {
        let planes = || (0..n).flat_map(move |b| x[(b * c + ch) * p..][..p].iter().copied());
        let mean = planes().sum::<T>() / cnt;
        let ss: T = planes().map(|v| (v - mean) * (v - mean)).sum();
        let var = ss / cnt;
        let inv_std = T::one() / (var + T::from_f64_lossy(eps)).sqrt();
        stats.mean[ch] = mean;
        stats.inv_std[ch] = inv_std;
        stats.unbiased_var[ch] = if count > 1 { ss / T::from_usize(count - 1).unwrap() } else { var };
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        for b in 0..n {
            let off = (b * c + ch) * p;
            for (o, &v) in out[off..off + p].iter_mut().zip(&x[off..off + p]) {
                *o = g * (v - mean) * inv_std + bt;
            }
        }
    }
    Ok((Tensor::new(input.shape().to_vec(), out)?, stats))
}

/// Inference-mode normalization with fixed statistics.
pub fn batch_norm_eval<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    if eps < 0.0 {
        return Err(Error::invalid(format!("batch norm eps must be >= 0, got {eps}")));
    }
    let (n, c, p) = check(
        "batch_norm",
        input,
        &[("gamma", gamma), ("beta", beta), ("running_mean", &stats.mean), ("running_var", &stats.var)],
    )?;
    let mut out = input.clone();
    let data = out.data_mut();
    for ch in 0..c {
        let inv_std = T::one() / (stats.var.data()[ch] + T::from_f64_lossy(eps)).sqrt();
        let scale = gamma.data()[ch] * inv_std;
        let shift = beta.data()[ch] - stats.mean.data()[ch] * scale;
        for b in 0..n {
            data[(b * c + ch) * p..][..p].iter_mut().for_each(|v| *v = *v * scale + shift);
        }
    }
    Ok(out)
}

/// Batch normalization in either mode. In training mode the running
/// statistics are updated with `cfg.momentum`.
pub fn batch_norm<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    cfg: BatchNormConfig,
    mode: BnMode,
) -> Result<Tensor<T>> {
    let (_, c, _, _) = input.dims4("batch_norm")?;
    ensure_channel_vector("batch_norm", "running_mean", &stats.mean, c)?;
    ensure_channel_vector("batch_norm", "running_var", &stats.var, c)?;
    match mode {
        BnMode::Training => {
            let (out, batch) = batch_norm_train(input, gamma, beta, cfg.eps)?;
            stats.update(&batch, cfg.momentum);
            Ok(out)
        }
        BnMode::Inference => batch_norm_eval(input, gamma, beta, stats, cfg.eps),
    }
}

#[derive(Debug, Clone)]
pub struct BnGrads<T: Element> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Backward of training-mode batch norm, differentiating through the batch statistics.
pub fn batch_norm_backward_train<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BatchStats<T>,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    ensure_same_shape("batch_norm_backward", input, grad_out)?;
    let (n, c, p) = check("batch_norm_backward", input, &[("gamma", gamma)])?;
    let cnt = T::from_usize(n * p).unwrap();
    let (x, gy) = (input.data(), grad_out.data());
    let mut gx = vec![T::zero(); x.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mean, inv_std, g) = (stats.mean[ch], stats.inv_std[ch], gamma.data()[ch]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * p;
            for (&v, &d) in x[off..off + p].iter().zip(&gy[off..off + p]) {
                sum_dy += d;
                sum_dy_xhat += d * (v - mean) * inv_std;
            }
        }
        ggamma[ch] = sum_dy_xhat;
        gbeta[ch] = sum_dy;
        let k = g * inv_std / cnt;
        for b in 0..n {
            let off = (b * c + ch) * p;
            for i in off..off + p {
                let xhat = (x[i] - mean) * inv_std;
                gx[i] = k * (cnt * gy[i] - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        gamma: Tensor::new(vec![c], ggamma)?,
        beta: Tensor::new(vec![c], gbeta)?,
    })
}

/// Backward of inference-mode batch norm (statistics are constants).
pub fn batch_norm_backward_eval<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &RunningStats<T>,
    eps: f64,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    ensure_same_shape("batch_norm_backward", input, grad_out)?;
    let (n, c, p) = check("batch_norm_backward", input, &[("gamma", gamma)])?;
    let (x, gy) = (input.data(), grad_out.data());
    let mut gx = vec![T::zero(); x.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mean = stats.mean.data()[ch];
        let inv_std = T::one() / (stats.var.data()[ch] + T::from_f64_lossy(eps)).sqrt();
        let k = gamma.data()[ch] * inv_std;
        for b in 0..n {
            let off = (b * c + ch) * p;
            for i in off..off + p {
                gx[i] = gy[i] * k;
                ggamma[ch] += gy[i] * (x[i] - mean) * inv_std;
                gbeta[ch] += gy[i];
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        gamma: Tensor::new(vec![c], ggamma)?,
        beta: Tensor::new(vec![c], gbeta)?,
    })
}
