//! Dense image grids and binary masks.
//!
//! Grids are stored row-major with interleaved channels (`H x W x C`) in
//! `f64`. The networks run in `f32` and convert at their boundary.

use crate::error::{Error, Result};

/// Which value range a grid is expected to live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValueRange {
    /// Clean images in `[-1, 1]`.
    #[default]
    Data,
    /// Noisy latents; unbounded.
    Diffusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    range: ValueRange,
}

impl ImageGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        ImageGrid {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
            range: ValueRange::Data,
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "ImageGrid::from_vec",
                format!("{} values for a {height}x{width}x{channels} grid", data.len()),
            ));
        }
        Ok(ImageGrid { height, width, channels, data, range: ValueRange::Data })
    }

    /// A 1x1 grid holding a single value; handy for scalar checks.
    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, 1, value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn with_range(mut self, range: ValueRange) -> Self {
        self.range = range;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// The channel values of pixel `p` (row-major pixel index).
    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &ImageGrid, op: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(), other.shape())))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str, timestep: usize) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op, timestep })
        }
    }

    /// Elementwise combination of two same-shaped grids, computed in `f64`.
    pub(crate) fn zip_map(
        &self,
        other: &ImageGrid,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<ImageGrid> {
        self.check_same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(self.with_data(data))
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        let data = self.data.iter().map(|&a| f(a)).collect();
        self.with_data(data)
    }

    fn with_data(&self, data: Vec<f64>) -> ImageGrid {
        debug_assert_eq!(data.len(), self.data.len());
        ImageGrid { height: self.height, width: self.width, channels: self.channels, data, range: self.range }
    }

    /// Pixels where `mask` is set come from `self`, the rest from `other`.
    pub fn select(&self, mask: &Mask, other: &ImageGrid) -> Result<ImageGrid> {
        self.check_same_shape(other, "select")?;
        mask.check_matches(self, "select")?;
        let c = self.channels;
        let mut out = other.clone();
        for (p, &m) in mask.data().iter().enumerate() {
            if m != 0 {
                out.data[p * c..(p + 1) * c].copy_from_slice(&self.data[p * c..(p + 1) * c]);
            }
        }
        out.range = self.range;
        Ok(out)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Values clamped into `[-1, 1]`.
    pub fn clamped(&self) -> ImageGrid {
        self.map(|v| v.clamp(-1.0, 1.0)).with_range(ValueRange::Data)
    }

    /// Channel-major `f32` copy (`C x H x W`), the layout the networks consume.
    pub fn to_chw(&self) -> Vec<f32> {
        let (h, w, c) = self.shape();
        let mut out = vec![0.0; h * w * c];
        for p in 0..h * w {
            for ch in 0..c {
                out[ch * h * w + p] = self.data[p * c + ch] as f32;
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, channels: usize, chw: &[f32]) -> Result<Self> {
        let hw = height * width;
        if chw.len() != hw * channels {
            return Err(Error::shape("ImageGrid::from_chw", "length mismatch"));
        }
        let mut data = vec![0.0; chw.len()];
        for ch in 0..channels {
            for p in 0..hw {
                data[p * channels + ch] = chw[ch * hw + p] as f64;
            }
        }
        Self::from_vec(height, width, channels, data)
    }
}

/// A binary `H x W` grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("Mask::new", format!("{} values for {height}x{width}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Validation("mask values must be 0 or 1".into()));
        }
        Ok(Mask { height, width, data })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![1; height * width] }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Mask { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn complement(&self) -> Mask {
        Mask { height: self.height, width: self.width, data: self.data.iter().map(|&v| 1 - v).collect() }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a & b).collect();
        Mask { height: self.height, width: self.width, data }
    }

    pub(crate) fn check_matches(&self, grid: &ImageGrid, op: &'static str) -> Result<()> {
        if self.height == grid.height() && self.width == grid.width() {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("mask {}x{} vs grid {}x{}", self.height, self.width, grid.height(), grid.width()),
            ))
        }
    }
}
