use super::{ensure_same_shape, Element, Tensor};
use crate::error::{Error, Result};

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("add", a, b)?;
    let mut out = a.clone();
    out.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x += y);
    Ok(out)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("mul", a, b)?;
    let mut out = a.clone();
    out.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x *= y);
    Ok(out)
}

pub fn scale<T: Element>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|v| v * s)
}

/// Concatenates `[N, Ci, H, W]` tensors along the channel axis.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let (n, _, h, w) = first.dims4("concat")?;
    let mut total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4("concat")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(
                "concat",
                format!("N,H,W of {:?} differ from {:?}", p.shape(), first.shape()),
            ));
        }
        total += pc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[b * c * plane..][..c * plane]);
        }
    }
    Tensor::new(vec![n, total, h, w], out)
}

/// Inverse of [`concat_channels`]: splits into pieces of the given channel counts.
pub fn split_channels<T: Element>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = x.dims4("split")?;
    if sizes.iter().sum::<usize>() != c {
        return Err(Error::shape("split", format!("sizes {sizes:?} do not sum to {c}")));
    }
    let plane = h * w;
    let mut out: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(n * s * plane)).collect();
    for b in 0..n {
        let mut off = b * c * plane;
        for (dst, &s) in out.iter_mut().zip(sizes) {
            dst.extend_from_slice(&x.data()[off..off + s * plane]);
            off += s * plane;
        }
    }
    out.into_iter()
        .zip(sizes)
        .map(|(d, &s)| Tensor::new(vec![n, s, h, w], d))
        .collect()
}
