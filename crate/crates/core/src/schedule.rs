//! Variance schedules, the closed-form forward process and the
//! noise-prediction training objective.
//!
//! Steps are 1-based: `t ∈ 1..=T`, with `ᾱ₀ ≡ 1` so the sampler's final
//! step can refer to `t − 1 = 0`.

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas in `[0, 1)`. Zero betas are
    /// allowed so tests can construct degenerate `ᾱ = 1` steps.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::InvalidRange(format!("beta {b} outside [0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn build(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("T must be at least 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas = match kind {
            ScheduleKind::Linear => {
                if steps == 1 {
                    vec![beta_min]
                } else {
                    let span = (beta_max - beta_min) / (steps - 1) as f64;
                    (0..steps).map(|i| beta_min + span * i as f64).collect()
                }
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let phase = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (phase * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=steps)
                    .map(|t| {
                        let b = 1.0 - f(t as f64) / f((t - 1) as f64);
                        b.clamp(f64::MIN_POSITIVE, MAX_BETA)
                    })
                    .collect()
            }
        };
        Self::from_betas(betas)
    }

    /// Linear, T = 1000, β ∈ [1e-4, 0.02].
    pub fn default_linear() -> Self {
        Self::build(ScheduleKind::Linear, 1000, 1e-4, 0.02).expect("default schedule is valid")
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// ᾱ for t = 1..=T in order.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.num_steps(),
            });
        }
        Ok(())
    }

    /// ᾱ_t for `t ∈ 0..=T`, with ᾱ₀ = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            _ => {
                self.check_step(t)?;
                Ok(self.alpha_bar[t - 1])
            }
        }
    }
}

/// `√ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(x0: &ImageGrid, t: usize, eps: &ImageGrid, sched: &NoiseSchedule) -> Result<ImageGrid> {
    sched.check_step(t)?;
    x0.ensure_same_shape(eps)?;
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Pixel-mean squared error between the model's noise prediction at the
/// diffused state and the injected noise.
pub fn simple_loss(
    model: &DenoiserModel,
    x0: &ImageGrid,
    t: usize,
    eps: &ImageGrid,
    cond: Option<&ImageGrid>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let x_t = forward_diffuse(x0, t, eps, sched)?;
    let pred = model.predict_eps(&x_t, t, cond, sched)?;
    pred.mse(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn two_step_linear() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn default_matches_running_product() {
        let s = NoiseSchedule::default_linear();
        let mut acc = 1.0;
        for t in 1..=1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
            acc *= 1.0 - beta;
            assert!((s.alpha_bar(t).unwrap() - acc).abs() < 1e-12);
        }
        assert!(s.alpha_bar(1000).unwrap() > 0.0);
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::build(kind, 200, 1e-4, 0.02).unwrap();
            for w in s.alpha_bars().windows(2) {
                assert!(w[1] < w[0]);
            }
            assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
            for t in 2..=200 {
                let expect = s.alpha_bar(t - 1).unwrap() * (1.0 - s.betas()[t - 1]);
                assert_eq!(s.alpha_bar(t).unwrap(), expect);
            }
        }
    }

    #[test]
    fn rejects_invalid_ranges() {
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, 0.01, 1.0).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Cosine, 0, 0.01, 0.02).is_err());
    }

    #[test]
    fn forward_diffuse_cases() {
        let x0 = ImageGrid::zeros(2, 2);
        let eps = ImageGrid::filled(2, 2, 1.0);
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let xt = forward_diffuse(&x0, 1, &eps, &s).unwrap();
        assert!(xt.data().iter().all(|v| (v - 0.75f64.sqrt()).abs() < 1e-15));

        let identity = NoiseSchedule::from_betas(vec![0.0]).unwrap();
        let x0 = Rng::new(1).uniform_grid(3, 3);
        assert!(matches!(
            forward_diffuse(&x0, 1, &eps, &identity),
            Err(Error::ShapeMismatch { .. })
        ));
        let eps3 = ImageGrid::filled(3, 3, 0.3);
        assert_eq!(forward_diffuse(&x0, 1, &eps3, &identity).unwrap(), x0);

        assert!(matches!(
            forward_diffuse(&x0, 2, &eps3, &identity),
            Err(Error::StepOutOfRange { t: 2, max: 1 })
        ));
    }

    #[test]
    fn forward_diffuse_tends_to_noise() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1, 0.999_999_999, 0.999_999_999).unwrap();
        let x0 = ImageGrid::filled(2, 2, 0.8);
        let eps = ImageGrid::filled(2, 2, -0.4);
        let xt = forward_diffuse(&x0, 1, &eps, &s).unwrap();
        assert!(xt.max_abs_diff(&eps).unwrap() < 1e-4);
    }
}
