//! Noise-prediction backends.

mod analytic;
mod conv;
mod train;

pub use analytic::AnalyticGaussianParams;
pub use conv::{timestep_embedding, ConvArch, ConvDenoiserParams, ConvParamGrads, TimeProjection, MAX_DEPTH};
pub use train::{train_denoiser, AuxiliaryLoss, TrainConfig, TrainOutcome, TrainingPair};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::schedule::NoiseSchedule;

/// Smallest ᾱ for which `x̂₀` can be formed.
pub const MIN_ALPHA_BAR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum DenoiserModel {
    AnalyticGaussian(AnalyticGaussianParams),
    Conv(ConvDenoiserParams),
}

impl DenoiserModel {
    pub fn is_conditioned(&self) -> bool {
        match self {
            DenoiserModel::AnalyticGaussian(_) => false,
            DenoiserModel::Conv(p) => p.arch.conditioned,
        }
    }

    /// ε_φ(x_t, t[, cond]).
    pub fn predict_eps(&self, x_t: &ImageGrid, t: usize, cond: Option<&ImageGrid>, sched: &NoiseSchedule) -> Result<ImageGrid> {
        let ab = sched.alpha_bar(t)?;
        sched.check_step(t)?;
        if let Some(c) = cond {
            x_t.ensure_same_shape(c)?;
        }
        match self {
            DenoiserModel::AnalyticGaussian(p) => p.predict_eps(x_t, ab, t),
            DenoiserModel::Conv(p) => p.predict_eps(x_t, t, ab, cond),
        }
    }

    /// `Jᵀ·cotangent` with `J = ∂ε_φ/∂x_t`.
    pub fn eps_jacobian_vjp(
        &self,
        x_t: &ImageGrid,
        t: usize,
        cond: Option<&ImageGrid>,
        cotangent: &ImageGrid,
        sched: &NoiseSchedule,
    ) -> Result<ImageGrid> {
        sched.check_step(t)?;
        x_t.ensure_same_shape(cotangent)?;
        let ab = sched.alpha_bar(t)?;
        match self {
            DenoiserModel::AnalyticGaussian(p) => {
                x_t.ensure_same_shape(&p.mu)?;
                cotangent.scale(p.jacobian_scale(ab, t)?)
            }
            DenoiserModel::Conv(p) => p.vjp_input(x_t, t, ab, cond, cotangent),
        }
    }
}

/// `x̂₀ = (x_t − √(1−ᾱ_t)·ε)/√ᾱ_t`.
pub fn predict_x0(x_t: &ImageGrid, eps: &ImageGrid, t: usize, sched: &NoiseSchedule) -> Result<ImageGrid> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t)?;
    if ab < MIN_ALPHA_BAR {
        return Err(Error::DegenerateAlpha(t));
    }
    let (inv, b) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps, |x, e| (x - b * e) * inv)
}
