//! Dense row-major tensors.
//!
//! Shapes follow `(batch, channel, depth, height, width)` for 5-D feature
//! maps. The element type is generic over [`Real`] so that training runs at
//! 32-bit while gradient checks run at 64-bit.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type used throughout the crate.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to Real")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        let head: Vec<&T> = self.data.iter().take(PREVIEW).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &head)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extents of a 5-D tensor.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        match self.shape.as_slice() {
            &[n, c, d, h, w] => Ok([n, c, d, h, w]),
            other => Err(Error::shape(format!("expected a 5-D tensor, got {other:?}"))),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "accumulate {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Contiguous channel range of a batch-1 feature map.
    pub fn channel_slice(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, d, h, w] = self.dims5()?;
        if n != 1 || start + len > c || len == 0 {
            return Err(Error::shape(format!(
                "channel slice {start}..{} of {:?}",
                start + len,
                self.shape
            )));
        }
        let vol = d * h * w;
        Ok(Tensor {
            shape: vec![1, len, d, h, w],
            data: self.data[start * vol..(start + len) * vol].to_vec(),
        })
    }

    /// Contiguous range of the leading axis.
    pub fn leading_slice(&self, start: usize, len: usize) -> Result<Self> {
        let lead = self.shape[0];
        if start + len > lead || len == 0 {
            return Err(Error::shape(format!(
                "leading slice {start}..{} of {:?}",
                start + len,
                self.shape
            )));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Tensor {
            shape,
            data: self.data[start * stride..(start + len) * stride].to_vec(),
        })
    }

    /// Concatenate batch-1 feature maps along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let [_, _, d, h, w] = first.dims5()?;
        let mut channels = 0;
        for p in parts {
            let [n, c, pd, ph, pw] = p.dims5()?;
            if n != 1 || (pd, ph, pw) != (d, h, w) {
                return Err(Error::shape(format!(
                    "concat {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            channels += c;
        }
        let mut data = Vec::with_capacity(channels * d * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![1, channels, d, h, w],
            data,
        })
    }
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "compare {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs().to_f64_lossy())
        .fold(0.0, f64::max))
}
