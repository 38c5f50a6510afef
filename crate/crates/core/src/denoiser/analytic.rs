//! Closed-form noise prediction for Gaussian data `x₀ ~ N(μ, σ²I)`.
//!
//! Under the forward process the marginal is `x_t ~ N(√ᾱ·μ, (ᾱσ² + 1 − ᾱ)I)`,
//! so the exact score is `−(x_t − √ᾱ·μ)/(ᾱσ² + 1 − ᾱ)` and the matching
//! noise prediction is `−√(1−ᾱ)` times that.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticGaussianParams {
    pub mu: ImageGrid,
    pub sigma2: f64,
}

impl AnalyticGaussianParams {
    pub fn new(mu: ImageGrid, sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidRange(format!("sigma2 must be >= 0, got {sigma2}")));
        }
        Ok(Self { mu, sigma2 })
    }

    /// Marginal variance of `x_t`.
    fn marginal_variance(&self, alpha_bar: f64) -> f64 {
        alpha_bar * self.sigma2 + 1.0 - alpha_bar
    }

    /// The scalar Jacobian `∂ε/∂x_t`.
    pub fn jacobian_scale(&self, alpha_bar: f64, t: usize) -> Result<f64> {
        let var = self.marginal_variance(alpha_bar);
        if var < 1e-300 {
            return Err(Error::DegenerateStep(t));
        }
        Ok((1.0 - alpha_bar).sqrt() / var)
    }

    pub fn predict_eps(&self, x_t: &ImageGrid, alpha_bar: f64, t: usize) -> Result<ImageGrid> {
        x_t.ensure_same_shape(&self.mu)?;
        let scale = self.jacobian_scale(alpha_bar, t)?;
        let shift = alpha_bar.sqrt();
        x_t.zip_map(&self.mu, |x, m| scale * (x - shift * m))
    }

    /// Posterior mean `E[x₀ | x_t]`.
    pub fn posterior_mean(&self, x_t: &ImageGrid, alpha_bar: f64) -> Result<ImageGrid> {
        x_t.ensure_same_shape(&self.mu)?;
        let var = self.marginal_variance(alpha_bar);
        let (a, b) = (self.sigma2 * alpha_bar.sqrt() / var, (1.0 - alpha_bar) / var);
        x_t.zip_map(&self.mu, |x, m| a * x + b * m)
    }
}
