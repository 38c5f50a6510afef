//! Spectral visual prior: squared distance between standardized,
//! log-compressed, centred Fourier magnitude spectra.
//!
//! The gradient is exact. The cotangent on the log-magnitude grid is
//! unshifted, turned into a complex cotangent on the spectrum through
//! `∂|F|/∂F = F/|F|` (taken as 0 where `|F| = 0`), and pulled back to the
//! image with a single inverse transform: `∂L/∂x = Re(HW·ifft2(G))`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2, fftshift_real, ifft2_complex, ifftshift_real};
use crate::grid::{ComplexSpectrum, ImageGrid};
use crate::guidance::ReferenceLoss;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralLossConfig {
    /// Added inside the logarithm: `log(1 + eps_log + |F|)`.
    pub eps_log: f64,
    /// Added to the standard deviation when standardizing.
    pub eps_std: f64,
}

impl Default for SpectralLossConfig {
    fn default() -> Self {
        Self {
            eps_log: 0.0,
            eps_std: 1e-8,
        }
    }
}

impl SpectralLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_std > 0.0) || !(self.eps_log >= 0.0) {
            return Err(Error::Config("eps_std must be > 0 and eps_log >= 0".into()));
        }
        Ok(())
    }
}

/// Intermediate values of the forward map, reused by the gradient.
struct SpectralForward {
    spectrum: ComplexSpectrum,
    /// Centred magnitudes `|F_shift|`.
    magnitude: ImageGrid,
    /// `log(1 + eps_log + |F_shift|)`.
    log_mag: ImageGrid,
    normalized: ImageGrid,
    std: f64,
}

fn spectral_forward(img: &ImageGrid, cfg: &SpectralLossConfig) -> SpectralForward {
    let spectrum = fft2(img);
    let magnitude = fftshift_real(&spectrum.magnitude());
    let log_mag = magnitude.map_raw(|r| (cfg.eps_log + r).ln_1p());
    let std = log_mag.std();
    let normalized = standardize(&log_mag, std, cfg.eps_std);
    SpectralForward {
        spectrum,
        magnitude,
        log_mag,
        normalized,
        std,
    }
}

fn standardize(m: &ImageGrid, std: f64, eps_std: f64) -> ImageGrid {
    let mean = m.mean();
    m.map_raw(|v| (v - mean) / (std + eps_std))
}

/// `log(1 + |fftshift(fft2(img))|)`.
pub fn magnitude_spectrum(img: &ImageGrid) -> ImageGrid {
    fftshift_real(&fft2(img).magnitude()).map_raw(f64::ln_1p)
}

/// `(m − mean(m)) / (std(m) + eps_std)`.
pub fn normalize_spectrum(m: &ImageGrid, cfg: &SpectralLossConfig) -> ImageGrid {
    standardize(m, m.std(), cfg.eps_std)
}

/// Pixel-mean squared difference of the standardized spectra.
pub fn visual_loss(hr: &ImageGrid, sr: &ImageGrid, cfg: &SpectralLossConfig) -> Result<f64> {
    hr.ensure_same_shape(sr)?;
    let a = spectral_forward(hr, cfg).normalized;
    let b = spectral_forward(sr, cfg).normalized;
    a.mse(&b)
}

/// Pulls a cotangent on the standardized spectrum of `img` back to `img`.
fn pull_back(fwd: &SpectralForward, grad_norm: &ImageGrid, cfg: &SpectralLossConfig) -> Result<ImageGrid> {
    let n = grad_norm.len() as f64;
    let (h, w) = grad_norm.shape();
    let denom = fwd.std + cfg.eps_std;
    let mean_m = fwd.log_mag.mean();
    let mean_g = grad_norm.mean();
    // Through the standardization. The std term vanishes when the spectrum
    // is constant (all deviations are zero).
    let centred_dot: f64 = grad_norm
        .data()
        .iter()
        .zip(fwd.log_mag.data())
        .map(|(g, m)| g * (m - mean_m))
        .sum();
    let std_coeff = if fwd.std > 0.0 {
        centred_dot / (n * fwd.std * denom * denom)
    } else {
        0.0
    };
    let grad_log: Vec<f64> = grad_norm
        .data()
        .iter()
        .zip(fwd.log_mag.data())
        .map(|(g, m)| (g - mean_g) / denom - std_coeff * (m - mean_m))
        .collect();
    // Through the log and back to unshifted frequency order.
    let grad_mag_shifted: Vec<f64> = grad_log
        .iter()
        .zip(fwd.magnitude.data())
        .map(|(g, r)| g / (1.0 + cfg.eps_log + r))
        .collect();
    let grad_mag = ifftshift_real(&ImageGrid::from_raw(h, w, grad_mag_shifted));
    // Through |F| to a complex cotangent, then through the DFT.
    let cot: Vec<Complex64> = grad_mag
        .data()
        .iter()
        .zip(fwd.spectrum.data())
        .map(|(&g, &f)| {
            let r = f.norm();
            if r > 0.0 {
                f * (g / r)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    let back = ifft2_complex(&ComplexSpectrum::from_raw(h, w, cot));
    ImageGrid::new(h, w, back.data().iter().map(|z| z.re * n).collect())
}

/// ∂ visual_loss(hr, sr) / ∂ sr.
pub fn visual_loss_grad(hr: &ImageGrid, sr: &ImageGrid, cfg: &SpectralLossConfig) -> Result<ImageGrid> {
    hr.ensure_same_shape(sr)?;
    let target = spectral_forward(hr, cfg).normalized;
    let fwd = spectral_forward(sr, cfg);
    let n = sr.len() as f64;
    let grad_norm = fwd.normalized.zip_map(&target, |a, b| 2.0 * (a - b) / n)?;
    pull_back(&fwd, &grad_norm, cfg)
}

/// Gradient of `⟨residual, N(M(sr))⟩`-style objectives: pulls an arbitrary
/// cotangent on the standardized spectrum of `sr` back to `sr`.
pub fn spectral_vjp(sr: &ImageGrid, cotangent: &ImageGrid, cfg: &SpectralLossConfig) -> Result<ImageGrid> {
    sr.ensure_same_shape(cotangent)?;
    pull_back(&spectral_forward(sr, cfg), cotangent, cfg)
}

/// The visual prior as a guidance loss against a reference image.
#[derive(Debug, Clone, Default)]
pub struct VisualPrior {
    pub config: SpectralLossConfig,
}

impl ReferenceLoss for VisualPrior {
    fn name(&self) -> &str {
        "visual"
    }

    fn loss(&self, reference: &ImageGrid, candidate: &ImageGrid) -> Result<f64> {
        visual_loss(reference, candidate, &self.config)
    }

    fn gradient(&self, reference: &ImageGrid, candidate: &ImageGrid) -> Result<ImageGrid> {
        visual_loss_grad(reference, candidate, &self.config)
    }
}
