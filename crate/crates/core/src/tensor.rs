//! Dense row-major tensors and the few kernels the transformer needs.
//!
//! There are no views or strides: a tensor is a shape plus a flat buffer whose
//! length always equals the product of the shape. Precision is a type
//! parameter; `f32` is the production path and `f64` exists so gradient
//! checks can run at tight tolerances.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::F32),
            1 => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Floating point element type of a [`Tensor`].
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn extend_le_bytes(self, out: &mut Vec<u8>);
    /// Decodes one element from exactly `PRECISION.byte_width()` bytes.
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        let mut raw = [0u8; 4];
        raw.copy_from_slice(bytes);
        f32::from_le_bytes(raw)
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        let mut raw = [0u8; 8];
        raw.copy_from_slice(bytes);
        f64::from_le_bytes(raw)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("precision", &T::PRECISION)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid("shape", alloc::format!("{shape:?} has an empty dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && !shape.contains(&0), "empty dimension in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the flat buffer. The length cannot change, so the
    /// shape invariant is preserved.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Row length: product of every dimension after the first.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        Ok(Self::from_fn(&[c, r], |i| self.data[(i % r) * c + i / r]))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape("add", other)?;
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape("add", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape("sub", other)?;
        let mut out = self.clone();
        for (a, &b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        Ok(out)
    }

    pub fn scale(&self, k: T) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= k);
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Dimension {
                op,
                left: other.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    fn same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
/// The summation order is fixed, so results are reproducible.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += k * x`
#[inline]
pub fn axpy<T: Scalar>(k: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += k * xi;
    }
}

/// Standard matrix product of `a[m×k]` and `b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (p, &aik) in a.data[i * k..(i + 1) * k].iter().enumerate() {
            axpy(aik, &b.data[p * n..(p + 1) * n], out_row);
        }
    }
    Ok(out)
}

/// `a[m×k] · b[n×k]ᵀ`, the layout used by every projection (weights are
/// stored `[out × in]`).
pub fn matmul_transposed<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let k = a.cols();
    let (n, k2) = b.dims2("matmul_transposed")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_transposed",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let m = a.rows();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let x = &a.data[i * k..(i + 1) * k];
        for (j, o) in out[i * n..(i + 1) * n].iter_mut().enumerate() {
            *o = dot(x, &b.data[j * k..(j + 1) * k]);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Numerically stable softmax of a slice, written into `out`.
pub fn softmax_into<T: Scalar>(x: &[T], out: &mut [T]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Dimension {
            op: "softmax",
            left: vec![0],
            right: vec![],
        });
    }
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

pub fn softmax_slice<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); x.len()];
    softmax_into(x, &mut out)?;
    Ok(out)
}

/// Softmax along `axis` of a tensor of any rank.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.shape.len() {
        return Err(Error::Dimension {
            op: "softmax",
            left: x.shape.clone(),
            right: vec![axis],
        });
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.clone();
    let mut lane = vec![T::zero(); len];
    let mut lane_out = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, v) in lane.iter_mut().enumerate() {
                *v = x.data[base + j * inner];
            }
            softmax_into(&lane, &mut lane_out)?;
            for (j, &v) in lane_out.iter().enumerate() {
                out.data[base + j * inner] = v;
            }
        }
    }
    Ok(out)
}

/// Per-row statistics kept by [`layer_norm_rows`] for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormStats<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_rows<T: Scalar>(
    x: &[T],
    width: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
    out: &mut [T],
    mut stats: Option<&mut NormStats<T>>,
) {
    let n = T::from_f64(width as f64);
    for (r, (row, out_row)) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)).enumerate() {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv_std = T::one() / (var + eps).sqrt();
        for j in 0..width {
            let xhat = (row[j] - mean) * inv_std;
            out_row[j] = xhat * gain[j] + bias[j];
            if let Some(s) = stats.as_deref_mut() {
                s.normalized[r * width + j] = xhat;
            }
        }
        if let Some(s) = stats.as_deref_mut() {
            s.inv_std[r] = inv_std;
        }
    }
}

/// `(x − mean) / sqrt(var + eps) · gain + bias` over the last axis.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let width = *x.shape.last().expect("tensor has at least one axis");
    if gain.data.len() != width || bias.data.len() != width {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: x.shape.clone(),
            right: gain.shape.clone(),
        });
    }
    if !(eps > T::zero()) {
        return Err(Error::invalid("eps", "must be positive"));
    }
    let mut out = Tensor::zeros(&x.shape);
    layer_norm_rows(&x.data, width, &gain.data, &bias.data, eps, &mut out.data, None);
    Ok(out)
}
