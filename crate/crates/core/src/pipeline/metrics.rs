//! Reference-based quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;

/// One row of a metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
    pub visual_loss: f64,
}

/// `10·log10(peak²/MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageGrid, b: &ImageGrid, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidRange(format!("peak must be > 0, got {peak}")));
    }
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    ssim_with_peak(a, b, 1.0)
}

/// Mean SSIM over every 8×8 window (stride 1) with uniform weights and
/// population statistics; `C1 = (0.01·peak)²`, `C2 = (0.03·peak)²`.
pub fn ssim_with_peak(a: &ImageGrid, b: &ImageGrid, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w) = a.shape();
    let n = SSIM_WINDOW;
    if h < n || w < n {
        return Err(Error::TooSmall { height: h, width: w, min: n });
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let count = (n * n) as f64;

    // Summed-area tables of x, y, x², y², xy.
    let stride = w + 1;
    let mut tables = vec![[0.0f64; 5]; (h + 1) * stride];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (a.get(r, c), b.get(r, c));
            let vals = [x, y, x * x, y * y, x * y];
            let up = tables[r * stride + c + 1];
            let left = tables[(r + 1) * stride + c];
            let diag = tables[r * stride + c];
            let cell = &mut tables[(r + 1) * stride + c + 1];
            for k in 0..5 {
                cell[k] = vals[k] + up[k] + left[k] - diag[k];
            }
        }
    }
    let window_sum = |r: usize, c: usize, k: usize| {
        tables[(r + n) * stride + c + n][k] - tables[r * stride + c + n][k] - tables[(r + n) * stride + c][k] + tables[r * stride + c][k]
    };

    let mut total = 0.0;
    let mut windows = 0usize;
    for r in 0..=h - n {
        for c in 0..=w - n {
            let mx = window_sum(r, c, 0) / count;
            let my = window_sum(r, c, 1) / count;
            let vx = (window_sum(r, c, 2) / count - mx * mx).max(0.0);
            let vy = (window_sum(r, c, 3) / count - my * my).max(0.0);
            let cov = window_sum(r, c, 4) / count - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn psnr_examples() {
        let a = ImageGrid::filled(4, 4, 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        let b = a.add_scalar(0.1).unwrap();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let c = a.add_scalar(1.0).unwrap();
        assert!(psnr(&a, &c, 1.0).unwrap().abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let x = Rng::new(1).uniform_grid(12, 10);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let c = ImageGrid::filled(9, 9, 0.4);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(ssim(&ImageGrid::zeros(7, 9), &ImageGrid::zeros(7, 9)), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn metrics_are_symmetric() {
        let mut rng = Rng::new(2);
        let a = rng.uniform_grid(16, 16);
        let b = rng.uniform_grid(16, 16);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ssim(&a, &b).unwrap() <= 1.0);
    }
}
