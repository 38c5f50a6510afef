//! Loss-gradient guidance.
//!
//! A guidance term scores the current clean-image estimate `x̂₀(x_t)`. Its
//! gradient is pulled back to `x_t` and added to the predicted noise,
//! `ε′ = ε + √(1−ᾱ_t)·Σ ρᵢ·∇_{x_t}Lᵢ`. Because `ε = −√(1−ᾱ_t)·score`, this
//! is the same as subtracting `Σ ρᵢ·∇Lᵢ` from the score.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::denoiser::{predict_x0, DenoiserModel};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::pipeline::degrade::DegradationModel;
use crate::schedule::NoiseSchedule;

/// Threshold below which `1 − ᾱ_t` is treated as zero.
const MIN_NOISE_VARIANCE: f64 = 1e-12;

/// A scalar functional of the clean-image estimate with its gradient.
pub trait GuidanceLoss: Send + Sync + fmt::Debug {
    fn loss(&self, x0: &ImageGrid) -> Result<f64>;

    /// ∂L/∂x̂₀.
    fn gradient(&self, x0: &ImageGrid) -> Result<ImageGrid>;
}

/// A discrepancy between a reference image and a candidate, differentiable
/// in the candidate. The visual and perceptual priors implement this.
pub trait ReferenceLoss: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn loss(&self, reference: &ImageGrid, candidate: &ImageGrid) -> Result<f64>;

    fn gradient(&self, reference: &ImageGrid, candidate: &ImageGrid) -> Result<ImageGrid>;
}

/// Binds a [`ReferenceLoss`] to a fixed reference image.
#[derive(Debug, Clone)]
pub struct AgainstReference {
    pub reference: ImageGrid,
    pub prior: Arc<dyn ReferenceLoss>,
}

impl GuidanceLoss for AgainstReference {
    fn loss(&self, x0: &ImageGrid) -> Result<f64> {
        self.prior.loss(&self.reference, x0)
    }

    fn gradient(&self, x0: &ImageGrid) -> Result<ImageGrid> {
        self.prior.gradient(&self.reference, x0)
    }
}

/// `‖g − x̂₀‖²` (sum of squares).
#[derive(Debug, Clone)]
pub struct IdentityTarget {
    pub target: ImageGrid,
}

impl GuidanceLoss for IdentityTarget {
    fn loss(&self, x0: &ImageGrid) -> Result<f64> {
        self.target.l2_norm_sq(x0)
    }

    fn gradient(&self, x0: &ImageGrid) -> Result<ImageGrid> {
        self.target.zip_map(x0, |g, x| -2.0 * (g - x))
    }
}

/// `‖lr − D(x̂₀)‖²` for a linear degradation `D`.
#[derive(Debug, Clone)]
pub struct DataFidelity {
    pub lr: ImageGrid,
    pub degrade: DegradationModel,
}

impl DataFidelity {
    fn residual(&self, x0: &ImageGrid) -> Result<ImageGrid> {
        let predicted = self.degrade.apply_linear(x0)?;
        self.lr.sub(&predicted)
    }
}

impl GuidanceLoss for DataFidelity {
    fn loss(&self, x0: &ImageGrid) -> Result<f64> {
        Ok(self.residual(x0)?.norm_sq())
    }

    fn gradient(&self, x0: &ImageGrid) -> Result<ImageGrid> {
        self.degrade.adjoint(&self.residual(x0)?)?.scale(-2.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoDecay {
    #[default]
    Constant,
    /// ρ·√(1−ᾱ_t): weaker guidance as the chain approaches the data.
    SqrtNoiseLevel,
}

#[derive(Debug, Clone)]
pub struct GuidanceTerm {
    pub name: String,
    pub rho: f64,
    pub decay: RhoDecay,
    pub loss: Arc<dyn GuidanceLoss>,
}

impl GuidanceTerm {
    pub fn new(name: impl Into<String>, rho: f64, loss: Arc<dyn GuidanceLoss>) -> Result<Self> {
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::Config(format!("rho must be finite and >= 0, got {rho}")));
        }
        Ok(Self {
            name: name.into(),
            rho,
            decay: RhoDecay::Constant,
            loss,
        })
    }

    pub fn with_decay(mut self, decay: RhoDecay) -> Self {
        self.decay = decay;
        self
    }

    pub fn effective_rho(&self, t: usize, sched: &NoiseSchedule) -> Result<f64> {
        Ok(match self.decay {
            RhoDecay::Constant => self.rho,
            RhoDecay::SqrtNoiseLevel => self.rho * (1.0 - sched.alpha_bar(t)?).sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Exact chain rule through the denoiser: ∂x̂₀/∂x_t = (I − √(1−ᾱ)·∂ε/∂x_t)/√ᾱ.
    #[default]
    ThroughDenoiser,
    /// Treats ε as constant: ∂x̂₀/∂x_t = I/√ᾱ.
    X0Detached,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidancePolicy {
    /// Inclusive window `[t_end, t_start]` of steps where guidance applies;
    /// `None` means every step.
    pub window: Option<(usize, usize)>,
    /// RMS threshold above which a gradient is rescaled; `None` disables.
    pub clip_rms: Option<f64>,
    pub jacobian: JacobianMode,
}

impl Default for GuidancePolicy {
    fn default() -> Self {
        Self {
            window: None,
            clip_rms: Some(1.0),
            jacobian: JacobianMode::ThroughDenoiser,
        }
    }
}

impl GuidancePolicy {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if let Some((t_start, t_end)) = self.window {
            if !(1 <= t_end && t_end <= t_start && t_start <= total_steps) {
                return Err(Error::Config(format!(
                    "guidance window must satisfy 1 <= t_end <= t_start <= {total_steps}, got [{t_start}, {t_end}]"
                )));
            }
        }
        if let Some(c) = self.clip_rms {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip threshold must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    pub fn is_active(&self, t: usize) -> bool {
        match self.window {
            Some((t_start, t_end)) => (t_end..=t_start).contains(&t),
            None => true,
        }
    }

    pub fn clip(&self, grad: &ImageGrid) -> Result<ImageGrid> {
        match self.clip_rms {
            Some(threshold) => {
                let rms = grad.rms();
                if rms > threshold {
                    grad.scale(threshold / rms)
                } else {
                    Ok(grad.clone())
                }
            }
            None => Ok(grad.clone()),
        }
    }
}

fn noise_std(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    let var = 1.0 - sched.alpha_bar(t)?;
    if var < MIN_NOISE_VARIANCE {
        return Err(Error::DegenerateStep(t));
    }
    Ok(var.sqrt())
}

/// `−ε/√(1−ᾱ_t)`.
pub fn noise_to_score(eps: &ImageGrid, t: usize, sched: &NoiseSchedule) -> Result<ImageGrid> {
    sched.check_step(t)?;
    let s = noise_std(t, sched)?;
    eps.map(|e| -e / s)
}

/// `−√(1−ᾱ_t)·score`.
pub fn score_to_noise(score: &ImageGrid, t: usize, sched: &NoiseSchedule) -> Result<ImageGrid> {
    sched.check_step(t)?;
    let s = noise_std(t, sched)?;
    score.map(|v| -s * v)
}

/// Pulls a cotangent on `x̂₀` back to `x_t`.
pub fn pull_back_to_xt(
    grad_x0: &ImageGrid,
    x_t: &ImageGrid,
    t: usize,
    cond: Option<&ImageGrid>,
    model: &DenoiserModel,
    mode: JacobianMode,
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    let ab = sched.alpha_bar(t)?;
    let inv = 1.0 / ab.sqrt();
    match mode {
        JacobianMode::X0Detached => grad_x0.scale(inv),
        JacobianMode::ThroughDenoiser => {
            let jt = model.eps_jacobian_vjp(x_t, t, cond, grad_x0, sched)?;
            let b = (1.0 - ab).sqrt();
            grad_x0.zip_map(&jt, |g, j| (g - b * j) * inv)
        }
    }
}

/// `∇_{x_t} L(x̂₀(x_t))` with `x̂₀` formed from the supplied noise prediction.
#[allow(clippy::too_many_arguments)]
pub fn guidance_grad_xt(
    term: &GuidanceTerm,
    x_t: &ImageGrid,
    eps: &ImageGrid,
    t: usize,
    cond: Option<&ImageGrid>,
    model: &DenoiserModel,
    policy: &GuidancePolicy,
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    let x0 = predict_x0(x_t, eps, t, sched)?;
    let grad_x0 = term.loss.gradient(&x0)?;
    pull_back_to_xt(&grad_x0, x_t, t, cond, model, policy.jacobian, sched)
}

/// `ε′ = ε + √(1−ᾱ_t)·Σ ρᵢ·clip(gradᵢ)`. Terms with ρ = 0 are skipped, so an
/// all-zero ρ list returns `eps` unchanged bit for bit.
pub fn adjust_noise(
    eps: &ImageGrid,
    grads: &[(f64, ImageGrid)],
    t: usize,
    sched: &NoiseSchedule,
    policy: &GuidancePolicy,
) -> Result<ImageGrid> {
    let mut correction: Option<ImageGrid> = None;
    for (rho, grad) in grads {
        eps.ensure_same_shape(grad)?;
        if *rho == 0.0 {
            continue;
        }
        let clipped = policy.clip(grad)?;
        correction = Some(match correction {
            None => clipped.scale(*rho)?,
            Some(acc) => acc.add_scaled(&clipped, *rho)?,
        });
    }
    match correction {
        None => Ok(eps.clone()),
        Some(c) => eps.add_scaled(&c, (1.0 - sched.alpha_bar(t)?).sqrt()),
    }
}

pub fn make_identity_term(target: ImageGrid, rho: f64) -> Result<GuidanceTerm> {
    GuidanceTerm::new("identity", rho, Arc::new(IdentityTarget { target }))
}

pub fn make_data_fidelity_term(lr: ImageGrid, degrade: DegradationModel, rho: f64) -> Result<GuidanceTerm> {
    degrade.validate()?;
    GuidanceTerm::new("data_fidelity", rho, Arc::new(DataFidelity { lr, degrade }))
}

pub fn make_reference_term(reference: ImageGrid, prior: Arc<dyn ReferenceLoss>, rho: f64) -> Result<GuidanceTerm> {
    let name = prior.name().to_string();
    GuidanceTerm::new(name, rho, Arc::new(AgainstReference { reference, prior }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::AnalyticGaussianParams;
    use crate::rng::Rng;
    use crate::schedule::ScheduleKind;

    fn sched_quarter() -> NoiseSchedule {
        // ᾱ₁ = 0.75, ᾱ₂ = 0.25.
        NoiseSchedule::from_betas(vec![0.25, 2.0 / 3.0]).unwrap()
    }

    #[test]
    fn score_conversions() {
        let s = sched_quarter();
        let ones = ImageGrid::filled(2, 2, 1.0);
        let score = noise_to_score(&ones, 1, &s).unwrap();
        assert!(score.data().iter().all(|v| (v + 2.0).abs() < 1e-15));
        let zero = ImageGrid::zeros(2, 2);
        assert_eq!(noise_to_score(&zero, 2, &s).unwrap().max_abs(), 0.0);

        let eps = Rng::new(1).normal_grid(4, 4);
        let sched = NoiseSchedule::default_linear();
        for t in [1, 2, 500, 1000] {
            let back = score_to_noise(&noise_to_score(&eps, t, &sched).unwrap(), t, &sched).unwrap();
            assert!(back.max_abs_diff(&eps).unwrap() < 1e-12);
        }
        let degenerate = NoiseSchedule::from_betas(vec![0.0]).unwrap();
        assert!(matches!(noise_to_score(&eps, 1, &degenerate), Err(Error::DegenerateStep(1))));
    }

    #[test]
    fn adjust_noise_examples() {
        let s = sched_quarter();
        let mut rng = Rng::new(3);
        let eps = rng.normal_grid(3, 3);
        let g = rng.normal_grid(3, 3);
        let policy = GuidancePolicy {
            clip_rms: None,
            ..GuidancePolicy::default()
        };
        let same = adjust_noise(&eps, &[(0.0, g.clone()), (0.0, g.clone())], 1, &s, &policy).unwrap();
        assert_eq!(same, eps);

        let ones = ImageGrid::filled(3, 3, 1.0);
        let out = adjust_noise(&eps, &[(1.0, ones)], 1, &s, &GuidancePolicy::default()).unwrap();
        let expect = eps.add_scalar(0.5).unwrap();
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn clipping_rescales_to_threshold() {
        let policy = GuidancePolicy {
            clip_rms: Some(0.5),
            ..GuidancePolicy::default()
        };
        let big = ImageGrid::filled(2, 2, 3.0);
        assert!((policy.clip(&big).unwrap().rms() - 0.5).abs() < 1e-15);
        let small = ImageGrid::filled(2, 2, 0.1);
        assert_eq!(policy.clip(&small).unwrap(), small);
    }

    #[test]
    fn policy_validation_and_window() {
        let p = GuidancePolicy {
            window: Some((80, 10)),
            ..GuidancePolicy::default()
        };
        p.validate(100).unwrap();
        assert!(p.is_active(10) && p.is_active(80) && !p.is_active(81) && !p.is_active(9));
        assert!(GuidancePolicy { window: Some((10, 80)), ..p }.validate(100).is_err());
        assert!(GuidancePolicy { window: Some((120, 1)), ..p }.validate(100).is_err());
        assert!(GuidancePolicy { clip_rms: Some(0.0), ..p }.validate(100).is_err());
    }

    #[test]
    fn detached_identity_gradient_is_scaled_residual() {
        let s = sched_quarter();
        let mut rng = Rng::new(5);
        let target = rng.uniform_grid(4, 4);
        let x_t = rng.normal_grid(4, 4);
        let eps = rng.normal_grid(4, 4);
        let model = DenoiserModel::AnalyticGaussian(AnalyticGaussianParams::new(ImageGrid::zeros(4, 4), 1.0).unwrap());
        let term = make_identity_term(target.clone(), 1.0).unwrap();
        let policy = GuidancePolicy {
            jacobian: JacobianMode::X0Detached,
            ..GuidancePolicy::default()
        };
        let got = guidance_grad_xt(&term, &x_t, &eps, 2, None, &model, &policy, &s).unwrap();
        let x0 = predict_x0(&x_t, &eps, 2, &s).unwrap();
        let expect = target.zip_map(&x0, |g, x| 2.0 * (-2.0 * (g - x))).unwrap();
        assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[derive(Debug)]
    struct Flat;

    impl GuidanceLoss for Flat {
        fn loss(&self, _: &ImageGrid) -> Result<f64> {
            Ok(3.0)
        }
        fn gradient(&self, x0: &ImageGrid) -> Result<ImageGrid> {
            Ok(ImageGrid::zeros(x0.height(), x0.width()))
        }
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 50, 1e-3, 0.05).unwrap();
        let mut rng = Rng::new(7);
        let model = DenoiserModel::AnalyticGaussian(AnalyticGaussianParams::new(rng.uniform_grid(3, 3), 0.2).unwrap());
        let term = GuidanceTerm::new("flat", 2.0, Arc::new(Flat)).unwrap();
        let x_t = rng.normal_grid(3, 3);
        let eps = model.predict_eps(&x_t, 20, None, &sched).unwrap();
        let g = guidance_grad_xt(&term, &x_t, &eps, 20, None, &model, &GuidancePolicy::default(), &sched).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn rho_decay() {
        let sched = sched_quarter();
        let term = make_identity_term(ImageGrid::zeros(1, 1), 2.0).unwrap().with_decay(RhoDecay::SqrtNoiseLevel);
        assert!((term.effective_rho(2, &sched).unwrap() - 2.0 * 0.75f64.sqrt()).abs() < 1e-15);
        assert!(GuidanceTerm::new("x", -1.0, Arc::new(Flat)).is_err());
    }
}
