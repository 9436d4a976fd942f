use super::{ensure_channel_vector, ensure_same_shape, Element, Tensor};
use crate::error::{Error, Result};

fn channel_layout<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c, ref rest @ ..] => Ok((n, c, rest.iter().product())),
        [c] => Ok((1, c, 1)),
        _ => Err(Error::shape(op, format!("unsupported shape {:?}", x.shape()))),
    }
}

/// Per-channel parametric ReLU: `x` if `x ≥ 0`, else `slope[c]·x`.
pub fn prelu<T: Element>(input: &Tensor<T>, slope: &Tensor<T>) -> Result<Tensor<T>> {
    prelu_in_place(input.clone(), slope)
}

/// [`prelu`] reusing the input's storage.
pub fn prelu_in_place<T: Element>(mut out: Tensor<T>, slope: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, p) = channel_layout("prelu", &out)?;
    ensure_channel_vector("prelu", "slope", slope, c)?;
    for (i, chunk) in out.data_mut().chunks_mut(p).enumerate() {
        let a = slope.data()[i % c];
        chunk.iter_mut().filter(|v| **v < T::zero()).for_each(|v| *v = a * *v);
    }
    debug_assert_eq!(out.numel(), n * c * p);
    Ok(out)
}

/// Returns `(grad_input, grad_slope)`. The kink at 0 takes the nonnegative branch.
pub fn prelu_backward<T: Element>(
    input: &Tensor<T>,
    slope: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    ensure_same_shape("prelu_backward", input, grad_out)?;
    let (_, c, p) = channel_layout("prelu_backward", input)?;
    ensure_channel_vector("prelu_backward", "slope", slope, c)?;
    let mut gx = grad_out.clone();
    let mut gs = vec![T::zero(); c];
    for (i, (gchunk, xchunk)) in gx.data_mut().chunks_mut(p).zip(input.data().chunks(p)).enumerate() {
        let ch = i % c;
        let a = slope.data()[ch];
        for (g, &x) in gchunk.iter_mut().zip(xchunk) {
            if x < T::zero() {
                gs[ch] += *g * x;
                *g *= a;
            }
        }
    }
    Ok((gx, Tensor::new(vec![c], gs)?))
}

/// Softmax over one axis of a tensor laid out as `[outer, axis, inner]`.
/// Terms that would be subnormal are written as exact zeros. They sit more
/// than 1e-38 below the row maximum, and subnormal operands slow every later
/// multiply by an order of magnitude.
fn softmax_axis<T: Element>(mut out: Tensor<T>, outer: usize, axis: usize, inner: usize) -> Tensor<T> {
    let tiny = T::min_positive_value();
    let floor = tiny.ln();
    let data = out.data_mut();
    for o in 0..outer {
        let base = o * axis * inner;
        for i in 0..inner {
            let idx = |k: usize| base + k * inner + i;
            let max = (0..axis).map(|k| data[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for k in 0..axis {
                let d = data[idx(k)] - max;
                let e = if d < floor { T::zero() } else { d.exp() };
                data[idx(k)] = e;
                denom += e;
            }
            for k in 0..axis {
                let p = data[idx(k)] / denom;
                data[idx(k)] = if p < tiny { T::zero() } else { p };
            }
        }
    }
    out
}

fn softmax_axis_backward<T: Element>(
    y: &Tensor<T>,
    grad_out: &Tensor<T>,
    outer: usize,
    axis: usize,
    inner: usize,
) -> Tensor<T> {
    let mut gx = grad_out.clone();
    let (yd, gd) = (y.data(), grad_out.data());
    let out = gx.data_mut();
    for o in 0..outer {
        let base = o * axis * inner;
        for i in 0..inner {
            let idx = |k: usize| base + k * inner + i;
            let dot: T = (0..axis).map(|k| yd[idx(k)] * gd[idx(k)]).sum();
            for k in 0..axis {
                out[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
            }
        }
    }
    gx
}

/// Per-pixel softmax over the channel axis of an `[N, C, H, W]` tensor,
/// stabilized by subtracting the per-pixel maximum.
pub fn softmax_channels<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("softmax_channels")?;
    Ok(softmax_axis(input.clone(), n, c, h * w))
}

/// Softmax over the last axis.
pub fn softmax_last<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    softmax_last_in_place(input.clone())
}

/// [`softmax_last`] reusing the input's storage.
pub fn softmax_last_in_place<T: Element>(input: Tensor<T>) -> Result<Tensor<T>> {
    let axis = *input.shape().last().unwrap();
    let outer = input.numel() / axis;
    Ok(softmax_axis(input, outer, axis, 1))
}

/// Backward of a softmax given its output `y`; `channels` selects
/// [`softmax_channels`] (true) or [`softmax_last`] (false).
pub fn softmax_backward<T: Element>(y: &Tensor<T>, grad_out: &Tensor<T>, channels: bool) -> Result<Tensor<T>> {
    ensure_same_shape("softmax_backward", y, grad_out)?;
    if channels {
        let (n, c, h, w) = y.dims4("softmax_backward")?;
        Ok(softmax_axis_backward(y, grad_out, n, c, h * w))
    } else {
        let axis = *y.shape().last().unwrap();
        Ok(softmax_axis_backward(y, grad_out, y.numel() / axis, axis, 1))
    }
}
