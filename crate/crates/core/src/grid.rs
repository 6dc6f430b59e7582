//! Dense per-pixel containers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A row-major `height × width` array of per-pixel values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Per-pixel class ids.
pub type LabelMap = Grid<u8>;

/// Per-pixel 0/1 flags.
pub type BinaryMask = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "grid of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// An 8-bit RGB image stored as interleaved `HWC` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width * 3] }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "rgb image of {height}x{width} needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(height, width);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
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
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }
}

/// Per-pixel vectors over `K` classes, stored pixel-major (`H × W × K`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ClassMap {
    pub fn from_vec(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * classes {
            return Err(Error::shape(format!(
                "class map of {height}x{width}x{classes} needs {} values, got {}",
                height * width * classes,
                data.len()
            )));
        }
        if classes == 0 {
            return Err(Error::shape("class map needs at least one class"));
        }
        Ok(Self { height, width, classes, data })
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
    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// The class vector of pixel `i` in row-major order.
    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    #[inline]
    pub fn pixel_at(&self, y: usize, x: usize) -> &[f64] {
        self.pixel(y * self.width + x)
    }

    pub fn iter_pixels(&self) -> core::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.classes)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Pre-softmax scores of a segmentation network.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsMap(pub ClassMap);

/// Per-pixel class distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap(pub ClassMap);

impl core::ops::Deref for LogitsMap {
    type Target = ClassMap;
    fn deref(&self) -> &ClassMap {
        &self.0
    }
}

impl core::ops::Deref for ProbabilityMap {
    type Target = ClassMap;
    fn deref(&self) -> &ClassMap {
        &self.0
    }
}

impl LogitsMap {
    pub fn from_vec(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        ClassMap::from_vec(height, width, classes, data).map(Self)
    }
}

impl ProbabilityMap {
    /// Wraps raw distributions without checking that they lie on the simplex;
    /// see [`ProbabilityMap::check_simplex`].
    pub fn from_vec(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        ClassMap::from_vec(height, width, classes, data).map(Self)
    }

    /// Fails if any pixel has a negative entry or a sum further than `tol` from 1.
    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        for (i, p) in self.iter_pixels().enumerate() {
            let mut sum = 0.0;
            for &v in p {
                if !v.is_finite() || v < -tol {
                    return Err(Error::numeric(format!("pixel {i} has invalid probability {v}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::numeric(format!("pixel {i} sums to {sum}, not 1")));
            }
        }
        Ok(())
    }
}
