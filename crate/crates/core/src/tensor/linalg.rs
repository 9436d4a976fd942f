use super::{Element, Tensor};
use crate::error::{Error, Result};

fn dims3<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, m, k] => Ok((b, m, k)),
        ref s => Err(Error::shape(op, format!("expected a 3-D tensor, got {s:?}"))),
    }
}

/// Which operands of a batched product are read transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transposed {
    pub a: bool,
    pub b: bool,
}

/// One stored `rows × cols` matrix per batch entry, read as itself or its transpose.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    t: bool,
}

impl<'a, T> View<'a, T> {
    fn dims(&self) -> (usize, usize) {
        if self.t { (self.cols, self.rows) } else { (self.rows, self.cols) }
    }

    fn strides(&self) -> (usize, usize) {
        let (r, c) = (self.cols, 1);
        if self.t { (c, r) } else { (r, c) }
    }

    fn at(self, i: usize) -> &'a [T] {
        &self.data[i * self.rows * self.cols..]
    }

    fn flipped(self) -> Self {
        Self { t: !self.t, ..self }
    }
}

/// `out[i] = x[i] · y[i]` for every batch entry, with `out` row-major.
fn batched<T: Element>(bs: usize, x: View<'_, T>, y: View<'_, T>, out: &mut [T]) {
    let ((m, k), (_, p)) = (x.dims(), y.dims());
    for i in 0..bs {
        T::gemm(m, k, p, x.at(i), x.strides(), y.at(i), y.strides(), T::zero(), &mut out[i * m * p..], (p, 1));
    }
}

fn operands<'a, T: Element>(
    op: &'static str,
    a: &'a Tensor<T>,
    b: &'a Tensor<T>,
    t: Transposed,
) -> Result<(usize, View<'a, T>, View<'a, T>)> {
    let (ba, ra, ca) = dims3(op, a)?;
    let (bb, rb, cb) = dims3(op, b)?;
    if ba != bb {
        return Err(Error::shape(op, format!("batch {ba} vs {bb}")));
    }
    let va = View { data: a.data(), rows: ra, cols: ca, t: t.a };
    let vb = View { data: b.data(), rows: rb, cols: cb, t: t.b };
    let (k, kb) = (va.dims().1, vb.dims().0);
    if k != kb {
        return Err(Error::shape(op, format!("inner dimensions {k} vs {kb}")));
    }
    Ok((ba, va, vb))
}

/// Batched matrix product `[B, M, K] · [B, K, P] → [B, M, P]`.
pub fn bmm<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    bmm_t(a, b, Transposed::default())
}

/// [`bmm`] of `op(a) · op(b)`, where `op` transposes the last two axes of the
/// flagged operands without copying them.
pub fn bmm_t<T: Element>(a: &Tensor<T>, b: &Tensor<T>, t: Transposed) -> Result<Tensor<T>> {
    let (bs, va, vb) = operands("bmm", a, b, t)?;
    let (m, p) = (va.dims().0, vb.dims().1);
    let mut out = vec![T::zero(); bs * m * p];
    batched(bs, va, vb, &mut out);
    Tensor::new(vec![bs, m, p], out)
}

/// Returns `(grad_a, grad_b)` for `c = bmm(a, b)`.
pub fn bmm_backward<T: Element>(a: &Tensor<T>, b: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    bmm_t_backward(a, b, Transposed::default(), grad_out)
}

/// Returns `(grad_a, grad_b)` for `c = bmm_t(a, b, t)`, shaped like the stored operands.
pub fn bmm_t_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    t: Transposed,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (bs, va, vb) = operands("bmm_backward", a, b, t)?;
    let (m, p) = (va.dims().0, vb.dims().1);
    if grad_out.shape() != [bs, m, p] {
        return Err(Error::shape("bmm_backward", format!("grad_out {:?}", grad_out.shape())));
    }
    let g = View { data: grad_out.data(), rows: m, cols: p, t: false };
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    // d op(A) = dC · op(B)ᵀ and d op(B) = op(A)ᵀ · dC; a transposed operand
    // takes the transpose of its product, (XY)ᵀ = YᵀXᵀ.
    if t.a {
        batched(bs, vb, g.flipped(), &mut ga);
    } else {
        batched(bs, g, vb.flipped(), &mut ga);
    }
    if t.b {
        batched(bs, g.flipped(), va, &mut gb);
    } else {
        batched(bs, va.flipped(), g, &mut gb);
    }
    Ok((Tensor::new(a.shape().to_vec(), ga)?, Tensor::new(b.shape().to_vec(), gb)?))
}

/// `[B, M, K] → [B, K, M]`.
pub fn transpose_last2<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (bs, m, k) = dims3("transpose", x)?;
    let mut out = vec![T::zero(); x.numel()];
    for i in 0..bs {
        let src = &x.data()[i * m * k..][..m * k];
        let dst = &mut out[i * m * k..][..m * k];
        for r in 0..m {
            for c in 0..k {
                dst[c * m + r] = src[r * k + c];
            }
        }
    }
    Tensor::new(vec![bs, k, m], out)
}
