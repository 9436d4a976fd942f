//! Dense row-major tensors in NCHW layout and the kernels the network needs.
//!
//! Every kernel here is a pure function of its inputs. The only mutable
//! state is batch-norm running statistics, which the caller owns and passes
//! in explicitly. Reductions run in a fixed order so results are
//! bit-reproducible.

mod activation;
mod conv;
mod elementwise;
mod gemm;
mod linalg;
mod norm;
mod pool;

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use activation::{prelu, prelu_backward, prelu_in_place, softmax_channels, softmax_last, softmax_last_in_place, softmax_backward};
pub use conv::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, conv_output_size,
    ConvGrads, ConvParams,
};
pub use elementwise::{add, concat_channels, mul, scale, split_channels};
pub use linalg::{bmm, bmm_backward, bmm_t, bmm_t_backward, transpose_last2, Transposed};
pub use norm::{
    batch_norm, batch_norm_backward_eval, batch_norm_backward_train, batch_norm_eval,
    batch_norm_train, BatchNormConfig, BatchStats, BnGrads, BnMode, RunningStats,
};
pub use pool::{avg_pool2d, avg_pool2d_backward};

/// Element precision tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Single,
    Double,
}

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = a · b + beta · c` for row/column-strided matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite conversion")
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::Single;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_strides: (usize, usize),
        b: &[f32],
        b_strides: (usize, usize),
        beta: f32,
        c: &mut [f32],
        c_strides: (usize, usize),
    ) {
        gemm::check_bounds(m, k, n, a.len(), a_strides, b.len(), b_strides, c.len(), c_strides);
        // SAFETY: bounds of all three operands were validated above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0 as isize,
                a_strides.1 as isize,
                b.as_ptr(),
                b_strides.0 as isize,
                b_strides.1 as isize,
                beta,
                c.as_mut_ptr(),
                c_strides.0 as isize,
                c_strides.1 as isize,
            )
        }
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::Double;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_strides: (usize, usize),
        b: &[f64],
        b_strides: (usize, usize),
        beta: f64,
        c: &mut [f64],
        c_strides: (usize, usize),
    ) {
        gemm::check_bounds(m, k, n, a.len(), a_strides, b.len(), b_strides, c.len(), c_strides);
        // SAFETY: bounds of all three operands were validated above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0 as isize,
                a_strides.1 as isize,
                b.as_ptr(),
                b_strides.0 as isize,
                b_strides.1 as isize,
                beta,
                c.as_mut_ptr(),
                c_strides.0 as isize,
                c_strides.1 as isize,
            )
        }
    }
}

/// N-dimensional dense array. 4-D activations are `[N, C, H, W]`, conv
/// weights `[Cout, Cin/groups, Kh, Kw]`, transposed-conv weights
/// `[Cin, Cout, Kh, Kw]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::shape("tensor", "rank must be at least 1"));
        }
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("dimension {axis} has size 0")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "degenerate shape {shape:?}");
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `[N, C, H, W]` of a 4-D tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(op, format!("expected a 4-D tensor, got {:?}", self.shape))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Converts element precision.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// One image of a batch as a `[1, C, H, W]` tensor.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4("batch_item")?;
        if index >= n {
            return Err(Error::shape("batch_item", format!("index {index} out of {n}")));
        }
        let plane = c * h * w;
        Ok(Self {
            shape: vec![1, c, h, w],
            data: self.data[index * plane..(index + 1) * plane].to_vec(),
        })
    }

    /// Stacks `[C, H, W]` (or `[1, C, H, W]`) tensors along a new batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "nothing to stack"))?;
        let inner: Vec<usize> = match first.shape.as_slice() {
            [1, rest @ ..] if first.rank() == 4 => rest.to_vec(),
            s => s.to_vec(),
        };
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for item in items {
            if item.numel() != first.numel() {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", item.shape, first.shape),
                ));
            }
            data.extend_from_slice(&item.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Self::new(shape, data)
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor<{:?}>{:?} [", T::DTYPE, self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}

pub(crate) fn ensure_same_shape<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

pub(crate) fn ensure_channel_vector<T: Element>(
    op: &'static str,
    what: &str,
    t: &Tensor<T>,
    channels: usize,
) -> Result<()> {
    if t.numel() != channels {
        return Err(Error::shape(
            op,
            format!("{what} has {} entries, input has {channels} channels", t.numel()),
        ));
    }
    Ok(())
}
