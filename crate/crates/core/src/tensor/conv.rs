use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Stride, symmetric zero padding, dilation and group count of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
            groups: 1,
        }
    }

    /// Padding that keeps spatial size for an odd kernel at stride 1.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::shape(
                op,
                format!("stride, dilation and groups must be >= 1, got {self:?}"),
            ));
        }
        Ok(())
    }
}

/// `floor((size + 2·pad − dilation·(kernel−1) − 1)/stride) + 1`, or `None`
/// when the result would be non-positive.
pub fn conv_output_size(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = size + 2 * padding;
    if padded < span || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Sliding-window geometry over an image of `c × h × w`.
#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Source coordinate of kernel tap `k` at output coordinate `o`.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, dil: usize, limit: usize) -> Option<usize> {
        let pos = (o * stride + k * dil) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// Output coordinates `lo..hi` (within `0..len`) whose tap `k` lands inside
    /// `0..limit`. The set is contiguous because the source is monotone in `o`.
    fn valid(len: usize, k: usize, stride: usize, pad: usize, dil: usize, limit: usize) -> (usize, usize) {
        let offset = k * dil;
        let lo = pad.saturating_sub(offset).div_ceil(stride);
        let hi = if limit + pad <= offset { 0 } else { (limit + pad - offset - 1) / stride + 1 };
        let hi = hi.min(len);
        (lo.min(hi), hi)
    }
}

/// Unfolds channels `c0..c0+g.c` of an `[n, c_total, h, w]` buffer into a
/// `(g.c·kh·kw) × (n·oh·ow)` matrix.
fn im2col<T: Element>(x: &[T], n: usize, c_total: usize, c0: usize, g: &Geom, col: &mut [T]) {
    let p = g.positions();
    let np = n * p;
    debug_assert_eq!(col.len(), g.rows() * np);
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                for b in 0..n {
                    let plane = &x[((b * c_total + c0 + c) * g.h * g.w)..][..g.h * g.w];
                    let dst = &mut col[row * np + b * p..][..p];
                    for oy in 0..g.oh {
                        let line = &mut dst[oy * g.ow..][..g.ow];
                        match Geom::source(oy, ky, g.stride, g.pad, g.dil, g.h) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * g.w..][..g.w];
                                let (lo, hi) = Geom::valid(g.ow, kx, g.stride, g.pad, g.dil, g.w);
                                line[..lo].fill(T::zero());
                                line[hi..].fill(T::zero());
                                if lo < hi {
                                    let first = lo * g.stride + kx * g.dil - g.pad;
                                    if g.stride == 1 {
                                        line[lo..hi].copy_from_slice(&src[first..][..hi - lo]);
                                    } else {
                                        let taps = src[first..].iter().step_by(g.stride);
                                        line[lo..hi].iter_mut().zip(taps).for_each(|(v, &s)| *v = s);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into the image buffer.
fn col2im<T: Element>(col: &[T], n: usize, c_total: usize, c0: usize, g: &Geom, x: &mut [T]) {
    let p = g.positions();
    let np = n * p;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                for b in 0..n {
                    let plane = &mut x[((b * c_total + c0 + c) * g.h * g.w)..][..g.h * g.w];
                    let src = &col[row * np + b * p..][..p];
                    for oy in 0..g.oh {
                        let Some(iy) = Geom::source(oy, ky, g.stride, g.pad, g.dil, g.h) else {
                            continue;
                        };
                        let line = &src[oy * g.ow..][..g.ow];
                        let dst = &mut plane[iy * g.w..][..g.w];
                        let (lo, hi) = Geom::valid(g.ow, kx, g.stride, g.pad, g.dil, g.w);
                        if lo < hi {
                            let first = lo * g.stride + kx * g.dil - g.pad;
                            let taps = dst[first..].iter_mut().step_by(g.stride);
                            taps.zip(&line[lo..hi]).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
        }
    }
}

/// `[N, C, P]` → `[C, N·P]`.
fn to_channel_major<T: Element>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..][..p].copy_from_slice(&x[(b * c + ch) * p..][..p]);
        }
    }
    out
}

/// `[C, N·P]` → `[N, C, P]`, adding an optional per-channel bias.
fn from_channel_major<T: Element>(m: Vec<T>, n: usize, c: usize, p: usize, bias: Option<&[T]>) -> Vec<T> {
    if n == 1 {
        let mut out = m;
        if let Some(bias) = bias {
            for (chunk, &b) in out.chunks_mut(p).zip(bias) {
                chunk.iter_mut().for_each(|v| *v += b);
            }
        }
        return out;
    }
    let mut out = vec![T::zero(); m.len()];
    for b in 0..n {
        for ch in 0..c {
            let dst = &mut out[(b * c + ch) * p..][..p];
            dst.copy_from_slice(&m[ch * n * p + b * p..][..p]);
            if let Some(bias) = bias {
                dst.iter_mut().for_each(|v| *v += bias[ch]);
            }
        }
    }
    out
}

fn channel_sums<T: Element>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); c];
    for b in 0..n {
        for (ch, s) in sums.iter_mut().enumerate() {
            for &v in &x[(b * c + ch) * p..][..p] {
                *s += v;
            }
        }
    }
    sums
}

struct ConvShape {
    n: usize,
    cin: usize,
    cout: usize,
    geom: Geom,
}

fn conv_shape<T: Element>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: &ConvParams,
) -> Result<ConvShape> {
    params.validate(op)?;
    let (n, cin, h, w) = input.dims4(op)?;
    let (cout, cin_g, kh, kw) = match *weight.shape() {
        [a, b, c, d] => (a, b, c, d),
        ref s => return Err(Error::shape(op, format!("weight must be 4-D, got {s:?}"))),
    };
    let groups = params.groups;
    if cin % groups != 0 {
        return Err(Error::shape(
            op,
            format!("input channels {cin} not divisible by groups {groups}"),
        ));
    }
    if cout % groups != 0 {
        return Err(Error::shape(
            op,
            format!("output channels {cout} not divisible by groups {groups}"),
        ));
    }
    if cin_g != cin / groups {
        return Err(Error::shape(
            op,
            format!(
                "weight dim 1 (in channels per group) is {cin_g}, input has {cin} channels / {groups} groups"
            ),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::shape(
                op,
                format!("bias has {} entries, weight dim 0 (out channels) is {cout}", b.numel()),
            ));
        }
    }
    let oh = conv_output_size(h, kh, params.stride, params.padding, params.dilation)
        .ok_or_else(|| Error::shape(op, format!("output height is non-positive for H={h}, K={kh}")))?;
    let ow = conv_output_size(w, kw, params.stride, params.padding, params.dilation)
        .ok_or_else(|| Error::shape(op, format!("output width is non-positive for W={w}, K={kw}")))?;
    Ok(ConvShape {
        n,
        cin,
        cout,
        geom: Geom {
            c: cin_g,
            h,
            w,
            kh,
            kw,
            stride: params.stride,
            pad: params.padding,
            dil: params.dilation,
            oh,
            ow,
        },
    })
}

/// Dilated, strided, grouped 2-D cross-correlation with zero padding.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: ConvParams,
) -> Result<Tensor<T>> {
    let s = conv_shape("conv2d", input, weight, bias, &params)?;
    let g = s.geom;
    let groups = params.groups;
    let (cout_g, k, p) = (s.cout / groups, g.rows(), g.positions());
    let np = s.n * p;
    let mut col = vec![T::zero(); k * np];
    let mut out = vec![T::zero(); s.cout * np];
    for grp in 0..groups {
        im2col(input.data(), s.n, s.cin, grp * g.c, &g, &mut col);
        T::gemm(
            cout_g,
            k,
            np,
            &weight.data()[grp * cout_g * k..],
            (k, 1),
            &col,
            (np, 1),
            T::zero(),
            &mut out[grp * cout_g * np..],
            (np, 1),
        );
    }
    let data = from_channel_major(out, s.n, s.cout, p, bias.map(|b| b.data()));
    Tensor::new(vec![s.n, s.cout, g.oh, g.ow], data)
}

/// Gradients of a convolution (or transposed convolution) with respect to
/// its input, weight and optional bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Element> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    with_bias: bool,
    params: ConvParams,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let s = conv_shape("conv2d_backward", input, weight, None, &params)?;
    let g = s.geom;
    if grad_out.shape() != [s.n, s.cout, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out {:?} vs output {:?}", grad_out.shape(), [s.n, s.cout, g.oh, g.ow]),
        ));
    }
    let groups = params.groups;
    let (cout_g, k, p) = (s.cout / groups, g.rows(), g.positions());
    let np = s.n * p;
    let gout = to_channel_major(grad_out.data(), s.n, s.cout, p);
    let mut col = vec![T::zero(); k * np];
    let mut gcol = vec![T::zero(); k * np];
    let mut gw = vec![T::zero(); weight.numel()];
    let mut gx = vec![T::zero(); input.numel()];
    for grp in 0..groups {
        let w_g = &weight.data()[grp * cout_g * k..];
        let gout_g = &gout[grp * cout_g * np..];
        im2col(input.data(), s.n, s.cin, grp * g.c, &g, &mut col);
        // dW = dY · colᵀ
        T::gemm(cout_g, np, k, gout_g, (np, 1), &col, (1, np), T::zero(), &mut gw[grp * cout_g * k..], (k, 1));
        // dcol = Wᵀ · dY
        T::gemm(k, cout_g, np, w_g, (1, k), gout_g, (np, 1), T::zero(), &mut gcol, (np, 1));
        col2im(&gcol, s.n, s.cin, grp * g.c, &g, &mut gx);
    }
    let bias = with_bias.then(|| {
        Tensor::new(vec![s.cout], channel_sums(grad_out.data(), s.n, s.cout, p))
            .expect("bias gradient shape")
    });
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias,
    })
}

struct TransposeShape {
    n: usize,
    cin: usize,
    cout: usize,
    /// Geometry of the adjoint convolution, which maps the output back onto the input grid.
    geom: Geom,
}

fn transpose_shape<T: Element>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<TransposeShape> {
    let (n, cin, h, w) = input.dims4(op)?;
    let (wcin, cout, kh, kw) = match *weight.shape() {
        [a, b, c, d] => (a, b, c, d),
        ref s => return Err(Error::shape(op, format!("weight must be 4-D, got {s:?}"))),
    };
    if stride == 0 {
        return Err(Error::shape(op, "stride must be >= 1"));
    }
    if wcin != cin {
        return Err(Error::shape(
            op,
            format!("weight dim 0 (in channels) is {wcin}, input has {cin} channels"),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::shape(
                op,
                format!("bias has {} entries, weight dim 1 (out channels) is {cout}", b.numel()),
            ));
        }
    }
    Ok(TransposeShape {
        n,
        cin,
        cout,
        geom: Geom {
            c: cout,
            h: (h - 1) * stride + kh,
            w: (w - 1) * stride + kw,
            kh,
            kw,
            stride,
            pad: 0,
            dil: 1,
            oh: h,
            ow: w,
        },
    })
}

/// Transposed convolution with zero padding: output size `(H−1)·stride + K`,
/// which is `H·stride` for the `K = stride` case.
pub fn conv_transpose2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let s = transpose_shape("conv_transpose2d", input, weight, bias, stride)?;
    let g = s.geom;
    let (k, p) = (g.rows(), g.positions());
    let np = s.n * p;
    let x = to_channel_major(input.data(), s.n, s.cin, p);
    let mut col = vec![T::zero(); k * np];
    // col = Wᵀ · x, with W viewed as (Cin × Cout·Kh·Kw)
    T::gemm(k, s.cin, np, weight.data(), (1, k), &x, (np, 1), T::zero(), &mut col, (np, 1));
    let mut out = vec![T::zero(); s.n * s.cout * g.h * g.w];
    col2im(&col, s.n, s.cout, 0, &g, &mut out);
    if let Some(b) = bias {
        let plane = g.h * g.w;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[i % s.cout];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(vec![s.n, s.cout, g.h, g.w], out)
}

pub fn conv_transpose2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    with_bias: bool,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let s = transpose_shape("conv_transpose2d_backward", input, weight, None, stride)?;
    let g = s.geom;
    if grad_out.shape() != [s.n, s.cout, g.h, g.w] {
        return Err(Error::shape(
            "conv_transpose2d_backward",
            format!("grad_out {:?} vs output {:?}", grad_out.shape(), [s.n, s.cout, g.h, g.w]),
        ));
    }
    let (k, p) = (g.rows(), g.positions());
    let np = s.n * p;
    let x = to_channel_major(input.data(), s.n, s.cin, p);
    let mut gcol = vec![T::zero(); k * np];
    im2col(grad_out.data(), s.n, s.cout, 0, &g, &mut gcol);
    let mut gx = vec![T::zero(); s.cin * np];
    T::gemm(s.cin, k, np, weight.data(), (k, 1), &gcol, (np, 1), T::zero(), &mut gx, (np, 1));
    let mut gw = vec![T::zero(); weight.numel()];
    T::gemm(s.cin, np, k, &x, (np, 1), &gcol, (1, np), T::zero(), &mut gw, (k, 1));
    let bias = with_bias.then(|| {
        Tensor::new(vec![s.cout], channel_sums(grad_out.data(), s.n, s.cout, g.h * g.w))
            .expect("bias gradient shape")
    });
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), from_channel_major(gx, s.n, s.cin, p, None))?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias,
    })
}
