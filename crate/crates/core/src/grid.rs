//! Single-channel rasters and their spectra.
//!
//! [`ImageGrid`] carries every image-shaped quantity in the crate: clean
//! images, diffusion states, noise draws, gradients and masks. Grids are
//! immutable once built; every operation returns a fresh grid.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    /// Builds a grid from row-major data, rejecting empty shapes, length
    /// mismatches and non-finite values.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidGrid(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::InvalidGrid(format!(
                "data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "non-finite value {} at index {i}",
                data[i]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Internal constructor for data produced by finite arithmetic on
    /// already-validated grids.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        assert!(value.is_finite(), "fill value must be finite");
        Self::from_raw(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    /// Builds a grid from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidGrid("ragged rows".into()));
        }
        Self::new(height, width, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn ensure_shape(&self, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: self.shape(),
            });
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &ImageGrid) -> Result<()> {
        other.ensure_shape(self.shape())
    }

    /// Applies `f` elementwise; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn map_raw(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &ImageGrid, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.height, self.width, data)
    }

    pub fn add(&self, other: &ImageGrid) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ImageGrid) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &ImageGrid) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    /// `self + factor * other`.
    pub fn add_scaled(&self, other: &ImageGrid, factor: f64) -> Result<Self> {
        self.zip_map(other, |a, b| a + factor * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        self.map(|v| v * factor)
    }

    pub fn add_scalar(&self, value: f64) -> Result<Self> {
        self.map(|v| v + value)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    /// Population variance over all pixels.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.len() as f64
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Σ(aᵢ − bᵢ)².
    pub fn l2_norm_sq(&self, other: &ImageGrid) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// Pixel-mean squared difference.
    pub fn mse(&self, other: &ImageGrid) -> Result<f64> {
        Ok(self.l2_norm_sq(other)? / self.len() as f64)
    }

    pub fn dot(&self, other: &ImageGrid) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn rms(&self) -> f64 {
        (self.norm_sq() / self.len() as f64).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &ImageGrid) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map_raw(|v| v.clamp(lo, hi))
    }

    /// Circular shift: output(r, c) = input(r − dy, c − dx).
    pub fn roll(&self, dy: isize, dx: isize) -> Self {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut data = vec![0.0; self.len()];
        for r in 0..h {
            for c in 0..w {
                let dst = ((r + dy).rem_euclid(h) * w + (c + dx).rem_euclid(w)) as usize;
                data[dst] = self.data[(r * w + c) as usize];
            }
        }
        Self::from_raw(self.height, self.width, data)
    }
}

/// Complex-valued H×W array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl ComplexSpectrum {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidGrid(format!(
                "spectrum data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidGrid("non-finite spectrum entry".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<Complex64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_raw(height, width, vec![Complex64::new(0.0, 0.0); height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn get(&self, u: usize, v: usize) -> Complex64 {
        self.data[u * self.width + v]
    }

    /// Elementwise magnitude as a real grid.
    pub fn magnitude(&self) -> ImageGrid {
        ImageGrid::from_raw(self.height, self.width, self.data.iter().map(|z| z.norm()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_lengths() {
        assert!(ImageGrid::new(2, 2, vec![0.0, 1.0, f64::NAN, 0.0]).is_err());
        assert!(ImageGrid::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ImageGrid::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn basic_reductions() {
        let x = ImageGrid::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(x.mean(), 0.5);
        assert_eq!(x.l2_norm_sq(&x).unwrap(), 0.0);
        assert!(ImageGrid::filled(3, 5, 0.7).variance() < 1e-30);
    }

    #[test]
    fn binary_ops_check_shapes() {
        let a = ImageGrid::zeros(2, 3);
        let b = ImageGrid::zeros(3, 2);
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
        assert!(a.l2_norm_sq(&b).is_err());
    }

    #[test]
    fn roll_moves_pixels_circularly() {
        let x = ImageGrid::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let y = x.roll(1, -1);
        assert_eq!(y.data(), &[5.0, 6.0, 4.0, 2.0, 3.0, 1.0]);
        assert_eq!(x.roll(2, 3), x);
    }
}
