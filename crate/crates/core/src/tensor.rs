//! Dense rank-4 tensors in batch × channels × height × width order.

use std::fmt;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type of a [`Tensor4`].
///
/// The engine stores `f32`; gradient-check harnesses instantiate the same
/// code with `f64`.
pub trait Scalar: Float + Default + Send + Sync + fmt::Debug + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape4 {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Number of elements in one spatial plane.
    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn scalar() -> Self {
        Shape4::new(1, 1, 1, 1)
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
}

impl fmt::Debug for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.channels, self.height, self.width
        )
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Row-major rank-4 array.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T = f32> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn scalar(value: T) -> Self {
        Tensor4 {
            shape: Shape4::scalar(),
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.batch {
            for c in 0..shape.channels {
                for h in 0..shape.height {
                    for w in 0..shape.width {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.channels + c) * self.shape.height + h) * self.shape.width + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// The `(n, c)` spatial plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.channels + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Tensor4::from_vec(shape, self.data)
    }

    /// Copies the spatial window `[h0, h0+height) × [w0, w0+width)` of every plane.
    pub fn window(&self, h0: usize, w0: usize, height: usize, width: usize) -> Result<Self> {
        if h0 + height > self.shape.height || w0 + width > self.shape.width {
            return Err(Error::Dimension(format!(
                "window {height}x{width} at ({h0}, {w0}) exceeds spatial size {}x{}",
                self.shape.height, self.shape.width
            )));
        }
        let shape = Shape4::new(self.shape.batch, self.shape.channels, height, width);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..self.shape.batch {
            for c in 0..self.shape.channels {
                for h in h0..h0 + height {
                    let start = self.offset(n, c, h, w0);
                    data.extend_from_slice(&self.data[start..start + width]);
                }
            }
        }
        Ok(Tensor4 { shape, data })
    }

    /// Writes `src` into this tensor with its top-left corner at `(h0, w0)`.
    pub fn paste(&mut self, src: &Tensor4<T>, h0: usize, w0: usize) -> Result<()> {
        let s = src.shape;
        if s.batch != self.shape.batch
            || s.channels != self.shape.channels
            || h0 + s.height > self.shape.height
            || w0 + s.width > self.shape.width
        {
            return Err(Error::Dimension(format!(
                "cannot paste {s} at ({h0}, {w0}) into {}",
                self.shape
            )));
        }
        for n in 0..s.batch {
            for c in 0..s.channels {
                for h in 0..s.height {
                    let dst = self.offset(n, c, h0 + h, w0);
                    let from = src.offset(n, c, h, 0);
                    self.data[dst..dst + s.width].copy_from_slice(&src.data[from..from + s.width]);
                }
            }
        }
        Ok(())
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor4<T>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "cannot compare {} with {}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }
}

impl<T: Scalar> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor4({}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}
