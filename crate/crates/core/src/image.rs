use par_tensor::{Scalar, Tensor};

use crate::erp::cyclic_shift_axis;
use crate::error::{ParError, Result};

/// Equirectangular raster, `[H, W, C]` channels-last with `W = 2H`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoImage<T: Scalar = f32> {
    data: Tensor<T>,
}

impl<T: Scalar> PanoImage<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.ndim() != 3 || data.dim(1) != 2 * data.dim(0) {
            return Err(ParError::contract(format!(
                "panorama must be [H, 2H, C], got {:?}",
                data.shape()
            )));
        }
        Ok(PanoImage { data })
    }

    pub fn from_fn(height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        let w = 2 * height;
        Self::new(Tensor::from_fn(&[height, w, channels], |i| {
            f(i / (w * channels), (i / channels) % w, i % channels)
        }))
    }

    pub fn height(&self) -> usize {
        self.data.dim(0)
    }

    pub fn width(&self) -> usize {
        self.data.dim(1)
    }

    pub fn channels(&self) -> usize {
        self.data.dim(2)
    }

    #[inline]
    pub fn at(&self, v: usize, u: usize, c: usize) -> T {
        self.data.data()[(v * self.width() + u) * self.channels() + c]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    /// Planar `[C, H, W]` copy.
    pub fn to_chw(&self) -> Tensor<T> {
        let (h, w, c) = (self.height(), self.width(), self.channels());
        Tensor::from_fn(&[c, h, w], |i| self.at((i / w) % h, i % w, i / (h * w)))
    }

    pub fn from_chw(t: &Tensor<T>) -> Result<Self> {
        if t.ndim() != 3 {
            return Err(ParError::contract(format!("expected [C, H, W], got {:?}", t.shape())));
        }
        let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
        Self::new(Tensor::from_fn(&[h, w, c], |i| {
            t.data()[((i % c) * h + i / (w * c)) * w + (i / c) % w]
        }))
    }

    /// Cyclic translation by `v` columns.
    pub fn shift(&self, v: isize) -> Result<Self> {
        Ok(PanoImage {
            data: cyclic_shift_axis(&self.data, 1, v)?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> PanoImage<U> {
        PanoImage { data: self.data.cast() }
    }

    pub fn mse(&self, other: &Self) -> Result<f64> {
        if self.data.shape() != other.data.shape() {
            return Err(ParError::contract(format!(
                "image shapes differ: {:?} vs {:?}",
                self.data.shape(),
                other.data.shape()
            )));
        }
        let n = self.data.numel() as f64;
        Ok(self
            .data
            .data()
            .iter()
            .zip(other.data.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            / n)
    }

    /// Peak signal-to-noise ratio for signals in `[0, 1]`.
    pub fn psnr(&self, other: &Self) -> Result<f64> {
        Ok(-10.0 * self.mse(other)?.max(1e-20).log10())
    }

    pub fn clamp01(&self) -> Self {
        PanoImage {
            data: self.data.map(|x| x.max(T::zero()).min(T::one())),
        }
    }
}
