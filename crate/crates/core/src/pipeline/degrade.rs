//! Blur → average-pool → optional noise, with the exact adjoint of the
//! linear part.
//!
//! Blur is a circular correlation with a kernel centred on its middle tap,
//! so the map has no boundary cases and its transpose is another circular
//! correlation with the flipped kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Identity,
    Gaussian { size: usize, std: f64 },
    Box { size: usize },
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Gaussian { size: 5, std: 1.0 }
    }
}

impl KernelSpec {
    pub fn build(&self) -> Result<ImageGrid> {
        match *self {
            KernelSpec::Identity => Ok(ImageGrid::filled(1, 1, 1.0)),
            KernelSpec::Gaussian { size, std } => {
                if size % 2 == 0 || !(std > 0.0) {
                    return Err(Error::Config(format!("gaussian kernel needs odd size and std > 0, got {size}, {std}")));
                }
                let c = (size / 2) as f64;
                let raw = ImageGrid::from_fn(size, size, |r, col| {
                    let (dy, dx) = (r as f64 - c, col as f64 - c);
                    (-(dy * dy + dx * dx) / (2.0 * std * std)).exp()
                })?;
                let total = raw.sum();
                raw.scale(1.0 / total)
            }
            KernelSpec::Box { size } => {
                if size % 2 == 0 {
                    return Err(Error::Config(format!("box kernel needs odd size, got {size}")));
                }
                Ok(ImageGrid::filled(size, size, 1.0 / (size * size) as f64))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationModel {
    pub scale: usize,
    pub kernel: ImageGrid,
    pub noise_std: f64,
}

impl Default for DegradationModel {
    /// ×4, 5×5 Gaussian blur with std 1.0, no noise.
    fn default() -> Self {
        Self::new(4, KernelSpec::default(), 0.0).expect("default degradation is valid")
    }
}

impl DegradationModel {
    pub fn new(scale: usize, kernel: KernelSpec, noise_std: f64) -> Result<Self> {
        let model = Self {
            scale,
            kernel: kernel.build()?,
            noise_std,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::Config("scale must be positive".into()));
        }
        if self.kernel.height() % 2 == 0 || self.kernel.width() % 2 == 0 {
            return Err(Error::Config("kernel dimensions must be odd".into()));
        }
        if self.kernel.data().iter().any(|&k| k < 0.0) || (self.kernel.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::Config("kernel must be nonnegative and sum to 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }

    pub fn lr_shape(&self, hr_shape: (usize, usize)) -> Result<(usize, usize)> {
        let (h, w) = hr_shape;
        if h % self.scale != 0 || w % self.scale != 0 {
            return Err(Error::IndivisibleDimensions {
                height: h,
                width: w,
                scale: self.scale,
            });
        }
        Ok((h / self.scale, w / self.scale))
    }

    fn correlate(&self, x: &ImageGrid, flipped: bool) -> ImageGrid {
        let (h, w) = x.shape();
        let (kh, kw) = self.kernel.shape();
        let (cy, cx) = ((kh / 2) as isize, (kw / 2) as isize);
        let sign = if flipped { -1 } else { 1 };
        let mut out = vec![0.0; h * w];
        for i in 0..kh {
            for j in 0..kw {
                let k = self.kernel.get(i, j);
                if k == 0.0 {
                    continue;
                }
                let dy = sign * (i as isize - cy);
                let dx = sign * (j as isize - cx);
                for r in 0..h {
                    let sr = (r as isize + dy).rem_euclid(h as isize) as usize;
                    for c in 0..w {
                        let sc = (c as isize + dx).rem_euclid(w as isize) as usize;
                        out[r * w + c] += k * x.data()[sr * w + sc];
                    }
                }
            }
        }
        ImageGrid::from_raw(h, w, out)
    }

    /// Blur then average-pool, without noise.
    pub fn apply_linear(&self, hr: &ImageGrid) -> Result<ImageGrid> {
        let (lh, lw) = self.lr_shape(hr.shape())?;
        let blurred = self.correlate(hr, false);
        let s = self.scale;
        let norm = 1.0 / (s * s) as f64;
        let mut out = vec![0.0; lh * lw];
        for r in 0..lh * s {
            for c in 0..lw * s {
                out[(r / s) * lw + c / s] += blurred.get(r, c) * norm;
            }
        }
        ImageGrid::new(lh, lw, out)
    }

    /// Transpose of [`apply_linear`](Self::apply_linear).
    pub fn adjoint(&self, lr_residual: &ImageGrid) -> Result<ImageGrid> {
        let s = self.scale;
        let (lh, lw) = lr_residual.shape();
        let (h, w) = (lh * s, lw * s);
        let norm = 1.0 / (s * s) as f64;
        let spread = ImageGrid::from_fn(h, w, |r, c| lr_residual.get(r / s, c / s) * norm)?;
        Ok(self.correlate(&spread, true))
    }

    /// Full degradation; noise is added (and the result clamped to [0, 1])
    /// only when `noise_std > 0` and a generator is supplied.
    pub fn degrade(&self, hr: &ImageGrid, rng: Option<&mut Rng>) -> Result<ImageGrid> {
        let clean = self.apply_linear(hr)?;
        match rng {
            Some(rng) if self.noise_std > 0.0 => {
                let noise = rng.normal_grid(clean.height(), clean.width());
                Ok(clean.add_scaled(&noise, self.noise_std)?.clamp(0.0, 1.0))
            }
            _ => Ok(clean),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_preserved() {
        let d = DegradationModel::default();
        let out = d.degrade(&ImageGrid::filled(16, 16, 0.37), None).unwrap();
        assert_eq!(out.shape(), (4, 4));
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-14));
    }

    #[test]
    fn checkerboard_pools_to_half() {
        let d = DegradationModel::new(2, KernelSpec::Identity, 0.0).unwrap();
        let board = ImageGrid::from_fn(8, 8, |r, c| ((r + c) % 2) as f64).unwrap();
        let out = d.degrade(&board, None).unwrap();
        assert_eq!(out, ImageGrid::filled(4, 4, 0.5));
    }

    #[test]
    fn indivisible_dimensions_fail() {
        let d = DegradationModel::default();
        assert!(matches!(
            d.degrade(&ImageGrid::zeros(10, 16), None),
            Err(Error::IndivisibleDimensions { .. })
        ));
    }

    #[test]
    fn identity_scale_one_adjoint_is_identity() {
        let d = DegradationModel::new(1, KernelSpec::Identity, 0.0).unwrap();
        let y = Rng::new(1).normal_grid(5, 7);
        assert_eq!(d.adjoint(&y).unwrap(), y);
        assert_eq!(d.adjoint(&ImageGrid::zeros(3, 3)).unwrap(), ImageGrid::zeros(3, 3));
    }

    #[test]
    fn adjoint_identity_for_asymmetric_kernel() {
        let mut d = DegradationModel::new(2, KernelSpec::Identity, 0.0).unwrap();
        d.kernel = ImageGrid::from_rows(&[vec![0.1, 0.2, 0.0], vec![0.3, 0.05, 0.1], vec![0.0, 0.15, 0.1]]).unwrap();
        d.validate().unwrap();
        let mut rng = Rng::new(4);
        let x = rng.normal_grid(8, 6);
        let y = rng.normal_grid(4, 3);
        let lhs = d.apply_linear(&x).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&d.adjoint(&y).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn noise_is_clamped() {
        let d = DegradationModel::new(2, KernelSpec::Identity, 5.0).unwrap();
        let out = d.degrade(&ImageGrid::filled(4, 4, 0.5), Some(&mut Rng::new(2))).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_kernels() {
        assert!(KernelSpec::Gaussian { size: 4, std: 1.0 }.build().is_err());
        assert!(KernelSpec::Box { size: 2 }.build().is_err());
        let mut d = DegradationModel::default();
        d.kernel = ImageGrid::filled(3, 3, 0.2);
        assert!(d.validate().is_err());
    }
}
