//! RGB images and multi-view sets.
//!
//! Pixel values are stored in `[0, 1]`. Diffusion math operates on the
//! affine-mapped range `[-1, 1]`; [`Image::to_signed`] and
//! [`Image::from_signed`] convert between the two.

use crate::num::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHANNELS: usize = 3;

/// Grayscale conversion weights (ITU-R BT.601 luma).
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("image dimensions {height}x{width}x{channels} do not match buffer of {len} values")]
    BadBuffer {
        height: usize,
        width: usize,
        channels: usize,
        len: usize,
    },
    #[error("image contains non-finite values")]
    NonFinite,
    #[error("view set needs at least 2 views, got {0}")]
    TooFewViews(usize),
}

/// Dense RGB image, row-major `(y, x, channel)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self, ImageError> {
        if data.len() != height * width * CHANNELS {
            return Err(ImageError::BadBuffer {
                height,
                width,
                channels: CHANNELS,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite);
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::zero(); height * width * CHANNELS],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
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

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    /// Affine map `[0,1] -> [-1,1]` as a flat tensor for diffusion.
    pub fn to_signed(&self) -> Vec<T> {
        let two = T::from_f64_lossy(2.0);
        self.data.iter().map(|&v| two * v - T::one()).collect()
    }

    /// Inverse of [`Image::to_signed`], clamped back into `[0,1]`.
    pub fn from_signed(height: usize, width: usize, tensor: &[T]) -> Result<Self, ImageError> {
        let half = T::from_f64_lossy(0.5);
        let data: Vec<T> = tensor
            .iter()
            .map(|&v| {
                let u = (v + T::one()) * half;
                u.max(T::zero()).min(T::one())
            })
            .collect();
        Self::new(height, width, data)
    }

    /// Luma grayscale plane of `height * width` values.
    pub fn to_grayscale(&self) -> Vec<T> {
        let w: Vec<T> = LUMA.iter().map(|&c| T::from_f64_lossy(c)).collect();
        self.data
            .chunks_exact(CHANNELS)
            .map(|px| px[0] * w[0] + px[1] * w[1] + px[2] * w[2])
            .collect()
    }

    /// Mean value per channel.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0.0f64; 3];
        for px in self.data.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                sums[c] += px[c].as_f64();
            }
        }
        let n = (self.height * self.width) as f64;
        [sums[0] / n, sums[1] / n, sums[2] / n]
    }

    /// Reinterpret in another scalar width.
    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }
}

/// Pose offset of a target view relative to the input view, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    pub d_elevation_deg: f64,
    pub d_azimuth_deg: f64,
}

/// An ordered set of `N` views at evenly spaced azimuths and fixed elevation.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet<T> {
    views: Vec<Image<T>>,
    azimuths_deg: Vec<f64>,
    elevation_deg: f64,
    deltas: Vec<PoseDelta>,
}

impl<T: Scalar> ViewSet<T> {
    /// Build a view set on the canonical circular rig: azimuth of view 0 is
    /// 0 degrees and the rest are evenly spaced over `[0, 360)`.
    pub fn circular(views: Vec<Image<T>>, elevation_deg: f64) -> Result<Self, ImageError> {
        let n = views.len();
        if n < 2 {
            return Err(ImageError::TooFewViews(n));
        }
        let azimuths_deg: Vec<f64> = (0..n).map(|i| 360.0 * i as f64 / n as f64).collect();
        let deltas = azimuths_deg
            .iter()
            .map(|&az| PoseDelta {
                d_elevation_deg: 0.0,
                d_azimuth_deg: az,
            })
            .collect();
        Ok(Self {
            views,
            azimuths_deg,
            elevation_deg,
            deltas,
        })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn view(&self, n: usize) -> &Image<T> {
        &self.views[n]
    }

    pub fn views(&self) -> &[Image<T>] {
        &self.views
    }

    pub fn azimuth_deg(&self, n: usize) -> f64 {
        self.azimuths_deg[n]
    }

    pub fn elevation_deg(&self) -> f64 {
        self.elevation_deg
    }

    pub fn delta(&self, n: usize) -> PoseDelta {
        self.deltas[n]
    }

    pub fn cast<U: Scalar>(&self) -> ViewSet<U> {
        ViewSet {
            views: self.views.iter().map(Image::cast).collect(),
            azimuths_deg: self.azimuths_deg.clone(),
            elevation_deg: self.elevation_deg,
            deltas: self.deltas.clone(),
        }
    }
}
