//! Dense images with interleaved channels (row-major `H x W x C`).

use serde::{Deserialize, Serialize};

use crate::error::{Result, TowerError};
use crate::scalar::Scalar;

/// Slack tolerated on the `[0, 1]` range check for normalized images.
pub const RANGE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image<S> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<S>,
}

/// A batch is a sequence of equally shaped images.
pub type ImageBatch<S> = Vec<Image<S>>;

impl<S: Scalar> Image<S> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(TowerError::Data(format!(
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: S) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, S::zero())
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> S,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> S {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: S) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }

    pub fn map(&self, mut f: impl FnMut(S) -> S) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Channel mean as a single-channel image.
    pub fn luminance(&self) -> Image<S> {
        if self.channels == 1 {
            return self.clone();
        }
        let inv = S::one() / S::lit(self.channels as f64);
        let data = self
            .data
            .chunks(self.channels)
            .map(|px| px.iter().fold(S::zero(), |a, &b| a + b) * inv)
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Fails with a data error if any value lies outside `[0, 1]` by more
    /// than [`RANGE_SLACK`] or is not finite.
    pub fn check_normalized(&self) -> Result<()> {
        let lo = S::lit(-RANGE_SLACK);
        let hi = S::lit(1.0 + RANGE_SLACK);
        match self.data.iter().position(|&v| !(v >= lo && v <= hi)) {
            None => Ok(()),
            Some(i) => Err(TowerError::Data(format!(
                "pixel {i} has value {} outside [0, 1]",
                self.data[i]
            ))),
        }
    }

    /// Per-image min-max normalization to `[0, 1]`; constant images map to 0.
    pub fn min_max_normalized(&self) -> Self {
        let (lo, hi) = self
            .data
            .iter()
            .fold((S::infinity(), S::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = hi - lo;
        if !(span > S::zero()) {
            return Self::zeros(self.height, self.width, self.channels);
        }
        self.map(|v| (v - lo) / span)
    }

    pub fn cast<T: Scalar>(&self) -> Image<T> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }

    /// Copies the pixels into a planar `C x H x W` buffer.
    pub fn to_planar(&self) -> Vec<S> {
        let hw = self.height * self.width;
        let mut out = vec![S::zero(); self.data.len()];
        for (i, px) in self.data.chunks(self.channels).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * hw + i] = v;
            }
        }
        out
    }

    pub fn from_planar(height: usize, width: usize, channels: usize, planar: &[S]) -> Result<Self> {
        let hw = height * width;
        if planar.len() != hw * channels {
            return Err(TowerError::Data("planar buffer size mismatch".into()));
        }
        Ok(Self::from_fn(height, width, channels, |r, c, ch| {
            planar[ch * hw + r * width + c]
        }))
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}
