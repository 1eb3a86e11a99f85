use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

use crate::error::{Result, TensorError};

/// Element types a [`Tensor`] can hold. Implemented for `f32` and `f64`.
pub trait Element:
    Float + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Dtype token used in the portable array file header.
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Little-endian byte width in the portable array file payload.
    const BYTE_WIDTH: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    const BYTE_WIDTH: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    const BYTE_WIDTH: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

/// Dense row-major N-dimensional array. 4-D tensors use (batch, channel,
/// height, width) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor, rejecting data whose length does not match the shape.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// 0-dimensional tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data viewed under a new shape.
    pub fn reshaped(self, shape: Vec<usize>) -> Result<Self> {
        let to_len: usize = shape.iter().product();
        if to_len != self.data.len() {
            return Err(TensorError::BadReshape {
                from: self.shape,
                from_len: self.data.len(),
                to: shape,
                to_len,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn min_value(&self) -> T {
        self.data.iter().cloned().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().cloned().fold(T::neg_infinity(), T::max)
    }

    /// Flat index into a 4-D tensor.
    #[inline]
    pub fn idx4(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    /// Flat index into a 2-D tensor.
    #[inline]
    pub fn idx2(&self, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        y * self.shape[1] + x
    }

    pub fn at2(&self, y: usize, x: usize) -> T {
        self.data[self.idx2(y, x)]
    }

    /// Copies the `i`-th slice along the leading axis; inverse of
    /// [`Tensor::stack`] up to the dropped axis.
    pub fn slice_first(&self, i: usize) -> Tensor<T> {
        assert!(!self.shape.is_empty() && i < self.shape[0], "slice_first out of range");
        let chunk = self.numel() / self.shape[0];
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * chunk..(i + 1) * chunk].to_vec(),
        }
    }

    /// Stacks same-shape tensors along a new leading batch dimension.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or(TensorError::NoInputs { op: "stack" })?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = Vec::with_capacity(first.ndim() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// Resizes a 2-D plane with bilinear interpolation (align-corners-false).
///
/// Pure forward-only variant for maps that live outside any tape.
pub fn bilinear_resize_2d<T: Element>(plane: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    assert_eq!(plane.ndim(), 2, "bilinear_resize_2d expects a 2-D plane");
    let (in_h, in_w) = (plane.shape()[0], plane.shape()[1]);
    let mut out = Tensor::zeros(&[out_h, out_w]);
    for oy in 0..out_h {
        let (y0, y1, wy) = bilinear_source(oy, in_h, out_h);
        for ox in 0..out_w {
            let (x0, x1, wx) = bilinear_source(ox, in_w, out_w);
            let one = T::one();
            let v = plane.at2(y0, x0) * (one - wy) * (one - wx)
                + plane.at2(y0, x1) * (one - wy) * wx
                + plane.at2(y1, x0) * wy * (one - wx)
                + plane.at2(y1, x1) * wy * wx;
            let idx = out.idx2(oy, ox);
            out.data_mut()[idx] = v;
        }
    }
    out
}

/// Source coordinates and interpolation weight for one output coordinate,
/// align-corners-false convention: src = (dst + 0.5) * in/out - 0.5, clamped.
#[inline]
pub(crate) fn bilinear_source<T: Element>(o: usize, in_dim: usize, out_dim: usize) -> (usize, usize, T) {
    let scale = in_dim as f64 / out_dim as f64;
    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_dim - 1);
    let i1 = (i0 + 1).min(in_dim - 1);
    let w = T::from_f64(src - i0 as f64);
    (i0, i1, w)
}
