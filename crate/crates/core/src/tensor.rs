//! Dense row-major tensors.
//!
//! Images are stored `[height, width, channels]`, convolution kernels
//! `[k, k, in_channels, out_channels]`. An empty shape denotes a scalar.

use std::fmt;

use crate::error::{Error, Result};

/// Global scalar type. Double precision unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Name of [`Real`] as written into file manifests.
#[cfg(not(feature = "f32"))]
pub const DTYPE: &str = "f64";
#[cfg(feature = "f32")]
pub const DTYPE: &str = "f32";

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(6).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, checking extents and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    /// Unchecked constructor for internal results whose shape is known good.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Real>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Fills a `[h, w, c]` tensor from a function of `(y, x, channel)`.
    pub fn from_hwc_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> Real) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Tensor::from_parts(vec![h, w, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<Real> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!("expected a scalar, got shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Interprets the tensor as an image and returns `(h, w, c)`.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(format!("expected [h, w, c], got {:?}", self.shape))),
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> Real {
        let (w, ch) = (self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: Real) {
        let (w, ch) = (self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c] = v;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "{what}: non-finite value {} at flat index {i} (shape {:?})",
                self.data[i], self.shape
            )));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
        self.same_shape(other, "zip_map")?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: Real) -> Tensor {
        self.map(|v| v * c)
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> Real {
        self.sum() / self.data.len() as Real
    }

    pub fn dot(&self, other: &Tensor) -> Result<Real> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<Real> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max))
    }

    pub fn min_value(&self) -> Real {
        self.data.iter().copied().fold(Real::INFINITY, Real::min)
    }

    pub fn max_value(&self) -> Real {
        self.data.iter().copied().fold(Real::NEG_INFINITY, Real::max)
    }

    /// Copies channel range `[start, start + len)` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Tensor> {
        let c = *self.shape.last().ok_or_else(|| Error::shape("slice of a scalar"))?;
        if start + len > c || len == 0 {
            return Err(Error::shape(format!("slice {start}..{} of last axis {c}", start + len)));
        }
        let rows = self.data.len() / c;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * c + start..r * c + start + len]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        Ok(Tensor::from_parts(shape, data))
    }

    /// Spatial crop of an image tensor.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
        let (ih, iw, c) = self.hwc()?;
        if top + h > ih || left + w > iw {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {ih}x{iw}"
            )));
        }
        let mut data = Vec::with_capacity(h * w * c);
        for y in top..top + h {
            let row = (y * iw + left) * c;
            data.extend_from_slice(&self.data[row..row + w * c]);
        }
        Ok(Tensor::from_parts(vec![h, w, c], data))
    }
}
