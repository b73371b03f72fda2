//! Dense rank-4 tensors in (batch, channel, height, width) layout.
//!
//! Data is row-major over (b, c, h, w). Every feature map, weight, sampling
//! map and image in the crate is one of these; gradients live on the tape,
//! not here.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dimensions of a rank-4 tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { b, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    /// Flat index of (b, c, y, x).
    #[inline(always)]
    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.c + c) * self.h + y) * self.w + x
    }

    pub fn same_spatial(&self, other: &Shape) -> bool {
        self.b == other.b && self.h == other.h && self.w == other.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.b, self.c, self.h, self.w)
    }
}

/// Dense rank-4 value. Cloning copies the data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        let shape = Shape::new(b, c, h, w);
        Tensor {
            data: vec![T::zero(); shape.numel()],
            shape,
        }
    }

    pub fn filled(b: usize, c: usize, h: usize, w: usize, value: T) -> Self {
        let shape = Shape::new(b, c, h, w);
        Tensor {
            data: vec![value; shape.numel()],
            shape,
        }
    }

    pub fn from_vec(b: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(b, c, h, w);
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Scalar tensor (1, 1, 1, 1).
    pub fn scalar(value: T) -> Self {
        Tensor::filled(1, 1, 1, 1, value)
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    #[inline(always)]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.idx(b, c, y, x)]
    }

    #[inline(always)]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, value: T) {
        let i = self.shape.idx(b, c, y, x);
        self.data[i] = value;
    }

    /// One (h, w) plane of a given batch item and channel.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let hw = self.shape.h * self.shape.w;
        let start = (b * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Elementwise conversion to another scalar type (via f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}
