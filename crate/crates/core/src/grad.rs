//! Reverse-mode differentiation over a recorded tape, and a central
//! finite-difference verifier.
//!
//! A [`Tape`] owns every value produced during a forward pass. Ops are
//! appended in execution order; [`Tape::backward`] walks them in exact
//! reverse order, accumulating gradients into per-value slots.

use crate::error::{Error, Result};
use crate::loss;
use crate::tensor::{self, BatchStats, ConvParams, DType, Element, RunningStats, Tensor, Transposed};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Element> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, params: ConvParams },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, stats: BatchStats<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, stats: RunningStats<T>, eps: f64 },
    Prelu { x: Var, slope: Var },
    AvgPool { x: Var, kernel: usize, stride: usize },
    Softmax { x: Var, channels: bool },
    Bmm { a: Var, b: Var, t: Transposed },
    Transpose { x: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    ScaleBy { x: Var, s: Var },
    Concat { parts: Vec<Var> },
    NegShiftRowMax { x: Var },
    Sum { x: Var },
    Focal { probs: Var, target: Tensor<T>, gamma: f64 },
    Tversky { probs: Var, target: Tensor<T>, alpha: f64, beta: f64, smooth: f64 },
}

impl<T: Element> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::Prelu { .. } => "prelu",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::Softmax { .. } => "softmax",
            Op::Bmm { .. } => "bmm",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Concat { .. } => "concat",
            Op::NegShiftRowMax { .. } => "neg_shift_rowmax",
            Op::Sum { .. } => "sum",
            Op::Focal { .. } => "focal_loss",
            Op::Tversky { .. } => "tversky_loss",
        }
    }
}

/// Ordered record of executed ops and the values they produced.
pub struct Tape<T: Element = f32> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    record: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Element> {
    slots: Vec<Option<Tensor<T>>>,
    visited: Vec<(usize, &'static str)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` influenced the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`], but a zero tensor of the right shape when `v` did not
    /// reach the loss.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }

    /// `(op index, op name)` in the order backward processed them.
    pub fn visited(&self) -> &[(usize, &'static str)] {
        &self.visited
    }
}

fn accumulate<T: Element>(slots: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut slots[v.0] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), g.shape());
            existing.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b);
        }
        slot @ None => *slot = Some(g),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            record: true,
        }
    }

    /// A tape that keeps values but records nothing for backward.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Names of the recorded ops in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.ops.iter().map(Op::name).collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.values.push(value);
        self.ops.push(if self.record { op } else { Op::Leaf });
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, params: ConvParams) -> Result<Var> {
        let out = tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), params)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, params }))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let out = tensor::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride }))
    }

    /// Training-mode batch norm. The returned batch statistics are for the
    /// caller's running-stat update.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (out, stats) = tensor::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let var = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                stats: stats.clone(),
            },
        );
        Ok((var, stats))
    }

    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: &RunningStats<T>, eps: f64) -> Result<Var> {
        let out = tensor::batch_norm_eval(self.value(x), self.value(gamma), self.value(beta), stats, eps)?;
        let stats = if self.record { stats.clone() } else { RunningStats::new(1) };
        Ok(self.push(out, Op::BatchNormEval { x, gamma, beta, stats, eps }))
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let out = tensor::prelu(self.value(x), self.value(slope))?;
        Ok(self.push(out, Op::Prelu { x, slope }))
    }

    /// [`Tape::prelu`] for a value that is read by nothing else. An inference
    /// tape applies it in place and leaves a scalar placeholder behind `x`.
    pub fn prelu_consume(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.record {
            return self.prelu(x, slope);
        }
        let out = tensor::prelu_in_place(self.take_value(x), self.value(slope))?;
        Ok(self.push(out, Op::Leaf))
    }

    /// [`Tape::softmax_last`] for a value that is read by nothing else, in
    /// place on an inference tape.
    pub fn softmax_last_consume(&mut self, x: Var) -> Result<Var> {
        if self.record {
            return self.softmax_last(x);
        }
        let out = tensor::softmax_last_in_place(self.take_value(x))?;
        Ok(self.push(out, Op::Leaf))
    }

    fn take_value(&mut self, x: Var) -> Tensor<T> {
        std::mem::replace(&mut self.values[x.0], Tensor::scalar(T::zero()))
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let out = tensor::avg_pool2d(self.value(x), kernel, stride)?;
        Ok(self.push(out, Op::AvgPool { x, kernel, stride }))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax_channels(self.value(x))?;
        Ok(self.push(out, Op::Softmax { x, channels: true }))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax_last(self.value(x))?;
        Ok(self.push(out, Op::Softmax { x, channels: false }))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_t(a, b, Transposed::default())
    }

    /// Batched product with the flagged operands read transposed.
    pub fn bmm_t(&mut self, a: Var, b: Var, t: Transposed) -> Result<Var> {
        let out = tensor::bmm_t(self.value(a), self.value(b), t)?;
        Ok(self.push(out, Op::Bmm { a, b, t }))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let out = tensor::transpose_last2(self.value(x))?;
        Ok(self.push(out, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = tensor::scale(self.value(x), s);
        self.push(out, Op::Scale { x, s })
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", format!("scale must hold one value, got {:?}", self.shape(s))));
        }
        let out = tensor::scale(self.value(x), self.value(s).item());
        Ok(self.push(out, Op::ScaleBy { x, s }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat_channels(&tensors)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }))
    }

    /// `rowmax(x) − x` along the last axis. The row maximum is treated as a
    /// constant in backward; any softmax consumer is invariant to it.
    pub fn neg_shift_rowmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let axis = *v.shape().last().unwrap();
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(axis) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.iter_mut().for_each(|e| *e = max - *e);
        }
        Ok(self.push(out, Op::NegShiftRowMax { x }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x })
    }

    pub fn focal_loss(&mut self, probs: Var, target: &Tensor<T>, gamma: f64) -> Result<Var> {
        let value = loss::focal_loss(self.value(probs), target, gamma)?;
        let target = if self.record { target.clone() } else { Tensor::zeros(&[1]) };
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(value)), Op::Focal { probs, target, gamma }))
    }

    pub fn tversky_loss(&mut self, probs: Var, target: &Tensor<T>, alpha: f64, beta: f64, smooth: f64) -> Result<Var> {
        let value = loss::tversky_loss(self.value(probs), target, alpha, beta, smooth)?;
        let target = if self.record { target.clone() } else { Tensor::zeros(&[1]) };
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(value)),
            Op::Tversky {
                probs,
                target,
                alpha,
                beta,
                smooth,
            },
        ))
    }

    /// Focal plus Tversky on probabilities `probs`.
    pub fn head_loss(&mut self, probs: Var, target: &Tensor<T>, cfg: &loss::LossConfig) -> Result<Var> {
        cfg.validate()?;
        let focal = self.focal_loss(probs, target, cfg.gamma)?;
        let tversky = self.tversky_loss(probs, target, cfg.alpha, cfg.beta, cfg.smooth)?;
        self.add(focal, tversky)
    }

    /// Gradients of the scalar `loss` with respect to every value on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.record {
            return Err(Error::invalid("backward on an inference tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        slots[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let mut visited = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = slots[idx].take() else { continue };
            let op = &self.ops[idx];
            if !matches!(op, Op::Leaf) {
                visited.push((idx, op.name()));
            }
            self.backward_op(idx, op, &g, &mut slots)?;
            slots[idx] = Some(g);
        }
        Ok(Gradients { slots, visited })
    }

    fn backward_op(&self, idx: usize, op: &Op<T>, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.values[v.0];
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, params } => {
                let grads = tensor::conv2d_backward(val(*x), val(*w), b.is_some(), *params, g)?;
                accumulate(slots, *x, grads.input);
                accumulate(slots, *w, grads.weight);
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    accumulate(slots, *b, gb);
                }
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let grads = tensor::conv_transpose2d_backward(val(*x), val(*w), b.is_some(), *stride, g)?;
                accumulate(slots, *x, grads.input);
                accumulate(slots, *w, grads.weight);
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    accumulate(slots, *b, gb);
                }
            }
            Op::BatchNormTrain { x, gamma, beta, stats } => {
                let grads = tensor::batch_norm_backward_train(val(*x), val(*gamma), stats, g)?;
                accumulate(slots, *x, grads.input);
                accumulate(slots, *gamma, grads.gamma);
                accumulate(slots, *beta, grads.beta);
            }
            Op::BatchNormEval { x, gamma, beta, stats, eps } => {
                let grads = tensor::batch_norm_backward_eval(val(*x), val(*gamma), stats, *eps, g)?;
                accumulate(slots, *x, grads.input);
                accumulate(slots, *gamma, grads.gamma);
                accumulate(slots, *beta, grads.beta);
            }
            Op::Prelu { x, slope } => {
                let (gx, gs) = tensor::prelu_backward(val(*x), val(*slope), g)?;
                accumulate(slots, *x, gx);
                accumulate(slots, *slope, gs);
            }
            Op::AvgPool { x, kernel, stride } => {
                let gx = tensor::avg_pool2d_backward(val(*x).shape(), *kernel, *stride, g)?;
                accumulate(slots, *x, gx);
            }
            Op::Softmax { x, channels } => {
                let y = &self.values[idx];
                accumulate(slots, *x, tensor::softmax_backward(y, g, *channels)?);
            }
            Op::Bmm { a, b, t } => {
                let (ga, gb) = tensor::bmm_t_backward(val(*a), val(*b), *t, g)?;
                accumulate(slots, *a, ga);
                accumulate(slots, *b, gb);
            }
            Op::Transpose { x } => accumulate(slots, *x, tensor::transpose_last2(g)?),
            Op::Reshape { x } => accumulate(slots, *x, g.clone().reshape(val(*x).shape())?),
            Op::Add { a, b } => {
                accumulate(slots, *a, g.clone());
                accumulate(slots, *b, g.clone());
            }
            Op::Mul { a, b } => {
                accumulate(slots, *a, tensor::mul(g, val(*b))?);
                accumulate(slots, *b, tensor::mul(g, val(*a))?);
            }
            Op::Scale { x, s } => accumulate(slots, *x, tensor::scale(g, *s)),
            Op::ScaleBy { x, s } => {
                let sv = val(*s);
                let gs: T = g.data().iter().zip(val(*x).data()).map(|(&a, &b)| a * b).sum();
                accumulate(slots, *x, tensor::scale(g, sv.item()));
                accumulate(slots, *s, Tensor::new(sv.shape().to_vec(), vec![gs])?);
            }
            Op::Concat { parts } => {
                let sizes: Vec<usize> = parts.iter().map(|&p| val(p).shape()[1]).collect();
                for (&p, gp) in parts.iter().zip(tensor::split_channels(g, &sizes)?) {
                    accumulate(slots, p, gp);
                }
            }
            Op::NegShiftRowMax { x } => {
                // d(max − e_j)/de_i = [i = argmax] − [i = j]; ties go to the first maximum.
                let v = val(*x);
                let axis = *v.shape().last().unwrap();
                let mut dx = tensor::scale(g, -T::one());
                for (row, (gr, dr)) in v.data().chunks(axis).zip(g.data().chunks(axis).zip(dx.data_mut().chunks_mut(axis))) {
                    let arg = (1..axis).fold(0, |best, i| if row[i] > row[best] { i } else { best });
                    dr[arg] += gr.iter().copied().sum::<T>();
                }
                accumulate(slots, *x, dx);
            }
            Op::Sum { x } => accumulate(slots, *x, Tensor::full(val(*x).shape(), g.item())),
            Op::Focal { probs, target, gamma } => {
                let gp = loss::focal_loss_grad(val(*probs), target, *gamma)?;
                accumulate(slots, *probs, tensor::scale(&gp, g.item()));
            }
            Op::Tversky {
                probs,
                target,
                alpha,
                beta,
                smooth,
            } => {
                let gp = loss::tversky_loss_grad(val(*probs), target, *alpha, *beta, *smooth)?;
                accumulate(slots, *probs, tensor::scale(&gp, g.item()));
            }
        }
        Ok(())
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Step used by [`gradcheck`] unless overridden.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Derivatives smaller than this are compared in absolute terms. Central
/// differences of an O(1) double-precision objective carry round-off near
/// 1e-10, which would otherwise dominate the ratio for vanishing gradients.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares analytic derivatives against central differences
/// `(f(x + h·e) − f(x − h·e)) / 2h`.
///
/// `eval(i, delta)` must return the objective with coordinate `i` shifted by `delta`.
pub fn compare_central_differences(
    op: &str,
    indices: &[usize],
    analytic: impl Fn(usize) -> f64,
    h: f64,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut worst: f64 = 0.0;
    for &i in indices {
        let numeric = (eval(i, h)? - eval(i, -h)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic(i), numeric));
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error: worst,
        checked: indices.len(),
    })
}

/// Checks the gradient of a scalar function of `x` at every element of `x`.
pub fn gradcheck<T, F>(op: &str, f: F, x: &Tensor<T>, h: f64) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    gradcheck_at(op, f, x, h, &all)
}

/// [`gradcheck`] restricted to the listed element indices.
pub fn gradcheck_at<T, F>(op: &str, f: F, x: &Tensor<T>, h: f64, indices: &[usize]) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if T::DTYPE != DType::Double {
        return Err(Error::Precision("gradcheck"));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(xv, &tape);
    compare_central_differences(
        op,
        indices,
        |i| analytic.data()[i].as_f64(),
        h,
        |i, delta| {
            let mut shifted = x.clone();
            shifted.data_mut()[i] += T::from_f64_lossy(delta);
            let mut tape = Tape::inference();
            let xv = tape.leaf(shifted);
            let out = f(&mut tape, xv)?;
            Ok(tape.value(out).item().as_f64())
        },
    )
}
