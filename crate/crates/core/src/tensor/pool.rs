use super::{conv_output_size, Element, Tensor};
use crate::error::{Error, Result};

fn pooled_dims<T: Element>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4("avg_pool2d")?;
    if kernel == 0 || stride == 0 {
        return Err(Error::shape("avg_pool2d", "kernel and stride must be >= 1"));
    }
    let oh = conv_output_size(h, kernel, stride, 0, 1)
        .ok_or_else(|| Error::shape("avg_pool2d", format!("window {kernel} exceeds height {h}")))?;
    let ow = conv_output_size(w, kernel, stride, 0, 1)
        .ok_or_else(|| Error::shape("avg_pool2d", format!("window {kernel} exceeds width {w}")))?;
    Ok((n, c, h, w, oh, ow))
}

/// Mean over `kernel × kernel` windows, no padding.
pub fn avg_pool2d<T: Element>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w, oh, ow) = pooled_dims(input, kernel, stride)?;
    let area = T::from_usize(kernel * kernel).unwrap();
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.chunks(h * w) {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = T::zero();
                for ky in 0..kernel {
                    let row = &plane[(y * stride + ky) * w + xo * stride..][..kernel];
                    for &v in row {
                        acc += v;
                    }
                }
                out.push(acc / area);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool2d_backward<T: Element>(
    input_shape: &[usize],
    kernel: usize,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(input_shape);
    let (n, c, h, w, oh, ow) = pooled_dims(&probe, kernel, stride)?;
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::shape("avg_pool2d_backward", format!("grad_out {:?}", grad_out.shape())));
    }
    let area = T::from_usize(kernel * kernel).unwrap();
    let mut gx = probe;
    for (plane, gplane) in gx.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for y in 0..oh {
            for xo in 0..ow {
                let g = gplane[y * ow + xo] / area;
                for ky in 0..kernel {
                    for v in &mut plane[(y * stride + ky) * w + xo * stride..][..kernel] {
                        *v += g;
                    }
                }
            }
        }
    }
    Ok(gx)
}
