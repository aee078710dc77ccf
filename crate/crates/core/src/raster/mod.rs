//! Image substrate: rasters, frames, masks, Netpbm I/O, filters, binary
//! morphology and connected-component analysis.

mod blobs;
mod draw;
mod filter;
mod morphology;
mod pnm;

pub use blobs::{connected_components, label_regions, Blob, Connectivity};
pub use draw::{draw_line, draw_polyline};
pub use filter::{gaussian_kernel, gaussian_smooth, median_filter};
pub use morphology::{dilate, erode, morph_close, morph_open};
pub use pnm::{
    read_frame_dir, read_pgm, write_frame_dir, write_mask_pgm, write_pgm, write_ppm, Rgb,
};

use crate::error::{check_dims, Error, Result};

/// Row-major 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type ScalarField = Raster<f64>;
pub type BinaryMask = Raster<bool>;
pub type LabelMap = Raster<u32>;

impl<T: Copy> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::param(format!(
                "raster data has {} samples, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let w = self.width;
        self.data[y * w + x] = value;
    }

    /// Sample with replicated borders.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> T {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
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

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self::filled(width, height, false)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        check_dims(self.dims(), other.dims())?;
        Ok(Raster {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// A grayscale video frame with luminance in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    index: u64,
    raster: ScalarField,
}

impl Frame {
    pub fn new(index: u64, width: usize, height: usize, samples: Vec<f64>) -> Result<Self> {
        Self::from_raster(index, Raster::from_vec(width, height, samples)?)
    }

    pub fn from_raster(index: u64, raster: ScalarField) -> Result<Self> {
        if raster.width == 0 || raster.height == 0 {
            return Err(Error::param("frame must be at least 1x1"));
        }
        if let Some(bad) = raster
            .data
            .iter()
            .position(|s| !s.is_finite() || !(0.0..=1.0).contains(s))
        {
            return Err(Error::param(format!(
                "sample {bad} = {} outside [0, 1]",
                raster.data[bad]
            )));
        }
        Ok(Self { index, raster })
    }

    /// Uniform frame.
    pub fn constant(index: u64, width: usize, height: usize, value: f64) -> Result<Self> {
        Self::from_raster(index, Raster::filled(width, height, value))
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn with_index(mut self, index: u64) -> Self {
        self.index = index;
        self
    }

    pub fn width(&self) -> usize {
        self.raster.width
    }

    pub fn height(&self) -> usize {
        self.raster.height
    }

    pub fn dims(&self) -> (usize, usize) {
        self.raster.dims()
    }

    pub fn samples(&self) -> &[f64] {
        &self.raster.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.raster.get(x, y)
    }

    pub fn raster(&self) -> &ScalarField {
        &self.raster
    }

    pub fn into_raster(self) -> ScalarField {
        self.raster
    }
}
