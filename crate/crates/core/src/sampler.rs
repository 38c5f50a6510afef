//! Guided DDIM reverse process.
//!
//! Each step predicts ε, forms `x̂₀` from it, evaluates every active
//! guidance term on `x̂₀`, pulls the gradients back to `x_t`, corrects the
//! noise to ε′ and takes a DDIM step with ε′. `eta = 0` gives the
//! deterministic sampler; `eta = 1` matches ancestral DDPM variances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{predict_x0, DenoiserModel};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::guidance::{adjust_noise, pull_back_to_xt, GuidancePolicy, GuidanceTerm};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    PureNoise,
    /// `√ᾱ·cond + √(1−ᾱ)·noise` at the first grid step.
    LrPlusNoise,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub eta: f64,
    pub seed: u64,
    /// Generator stream; concurrent chains use distinct streams.
    pub stream: u64,
    pub terms: Vec<GuidanceTerm>,
    pub policy: GuidancePolicy,
    pub init: InitMode,
    /// Largest step of the grid; `None` starts at `T`.
    pub start_step: Option<usize>,
    pub record_trajectory: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 100,
            eta: 0.0,
            seed: 0,
            stream: 0,
            terms: Vec::new(),
            policy: GuidancePolicy::default(),
            init: InitMode::PureNoise,
            start_step: None,
            record_trajectory: false,
        }
    }
}

impl SamplerConfig {
    pub fn first_step(&self, sched: &NoiseSchedule) -> usize {
        self.start_step.unwrap_or(sched.num_steps())
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let start = self.first_step(sched);
        if start == 0 || start > sched.num_steps() {
            return Err(Error::Config(format!(
                "start_step must be in 1..={}, got {start}",
                sched.num_steps()
            )));
        }
        if self.num_steps == 0 || self.num_steps > start {
            return Err(Error::Config(format!(
                "num_steps must be in 1..={start}, got {}",
                self.num_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        self.policy.validate(sched.num_steps())
    }
}

/// One recorded reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub t: usize,
    pub x_t: ImageGrid,
    pub x0_hat: ImageGrid,
    /// `(term name, loss on x0_hat)` for the terms active at this step.
    pub losses: Vec<(String, f64)>,
    /// RMS of each active term's gradient with respect to `x_t`, before clipping.
    pub grad_rms: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

/// Line-delimited dump record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub t: usize,
    pub losses: Vec<(String, f64)>,
    pub grad_rms: Vec<f64>,
}

impl Trajectory {
    pub fn records(&self) -> Vec<TrajectoryRecord> {
        self.steps
            .iter()
            .enumerate()
            .map(|(step, s)| TrajectoryRecord {
                step,
                t: s.t,
                losses: s.losses.clone(),
                grad_rms: s.grad_rms.clone(),
            })
            .collect()
    }

    /// JSON Lines, one record per step.
    pub fn to_jsonl(&self) -> String {
        self.records()
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }
}

/// `num_steps` evenly spaced steps over `1..=T`, descending, including both
/// `T` and 1 when `num_steps ≥ 2`.
pub fn step_grid(total: usize, num_steps: usize) -> Vec<usize> {
    assert!(num_steps >= 1 && num_steps <= total);
    if num_steps == 1 {
        return vec![total];
    }
    let span = (total - 1) as f64 / (num_steps - 1) as f64;
    let mut grid: Vec<usize> = (0..num_steps).map(|i| 1 + (i as f64 * span).round() as usize).collect();
    grid.dedup();
    grid.reverse();
    grid
}

/// σ for the transition `t → t_prev`.
pub fn ddim_sigma(eta: f64, alpha_bar: f64, alpha_bar_prev: f64) -> f64 {
    eta * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar)).sqrt() * (1.0 - alpha_bar / alpha_bar_prev).sqrt()
}

/// σ for each transition of a descending grid; the last transition goes to
/// `t = 0` with `ᾱ₀ = 1`.
pub fn sigma_schedule(eta: f64, sched: &NoiseSchedule, grid: &[usize]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must be in [0, 1], got {eta}")));
    }
    grid.iter()
        .enumerate()
        .map(|(i, &t)| {
            let t_prev = grid.get(i + 1).copied().unwrap_or(0);
            Ok(ddim_sigma(eta, sched.alpha_bar(t)?, sched.alpha_bar(t_prev)?))
        })
        .collect()
}

/// `√ᾱ_{t_prev}·x̂₀ + √(1−ᾱ_{t_prev}−σ²)·ε + σ·z`.
pub fn ddim_step(
    x_t: &ImageGrid,
    eps: &ImageGrid,
    t: usize,
    t_prev: usize,
    sigma: f64,
    z: Option<&ImageGrid>,
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    let ab_prev = sched.alpha_bar(t_prev)?;
    let radicand = 1.0 - ab_prev - sigma * sigma;
    if radicand < -1e-15 {
        return Err(Error::NegativeRadicand { t, t_prev });
    }
    let x0 = predict_x0(x_t, eps, t, sched)?;
    let mut out = x0.scale(ab_prev.sqrt())?.add_scaled(eps, radicand.max(0.0).sqrt())?;
    if sigma != 0.0 {
        let z = z.ok_or_else(|| Error::Config("stochastic step needs a noise draw".into()))?;
        out = out.add_scaled(z, sigma)?;
    }
    Ok(out)
}

fn non_finite(t: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::InvalidGrid(_) => Error::NonFiniteState(t),
        other => other,
    }
}

/// Runs one reverse chain of shape `shape`. Returns the final image clamped
/// to [0, 1] together with the (possibly empty) trajectory.
pub fn guided_sample(
    model: &DenoiserModel,
    cond: Option<&ImageGrid>,
    shape: (usize, usize),
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<(ImageGrid, Trajectory)> {
    let (out, traj) = guided_sample_raw(model, cond, shape, cfg, sched)?;
    Ok((out.clamp(0.0, 1.0), traj))
}

/// As [`guided_sample`] but without the final clamp.
pub fn guided_sample_raw(
    model: &DenoiserModel,
    cond: Option<&ImageGrid>,
    shape: (usize, usize),
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<(ImageGrid, Trajectory)> {
    run_chain(model, cond, shape, cfg, sched, None)
}

/// As [`guided_sample_raw`] but starting from the supplied initial noise
/// instead of drawing it; later draws (for `eta > 0`) still come from the
/// configured stream.
pub fn guided_sample_from_noise(
    model: &DenoiserModel,
    cond: Option<&ImageGrid>,
    noise: ImageGrid,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<(ImageGrid, Trajectory)> {
    let shape = noise.shape();
    run_chain(model, cond, shape, cfg, sched, Some(noise))
}

fn run_chain(
    model: &DenoiserModel,
    cond: Option<&ImageGrid>,
    shape: (usize, usize),
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    initial: Option<ImageGrid>,
) -> Result<(ImageGrid, Trajectory)> {
    cfg.validate(sched)?;
    if let Some(c) = cond {
        c.ensure_shape(shape)?;
    }
    let grid = step_grid(cfg.first_step(sched), cfg.num_steps);
    let sigmas = sigma_schedule(cfg.eta, sched, &grid)?;
    let mut rng = Rng::with_stream(cfg.seed, cfg.stream);
    let noise = match initial {
        Some(n) => n,
        None => rng.normal_grid(shape.0, shape.1),
    };
    let mut x = match cfg.init {
        InitMode::PureNoise => noise,
        InitMode::LrPlusNoise => {
            let c = cond.ok_or(Error::MissingCondition)?;
            let ab = sched.alpha_bar(grid[0])?;
            c.scale(ab.sqrt())?.add_scaled(&noise, (1.0 - ab).sqrt())?
        }
    };
    let mut trajectory = Trajectory::default();

    for (i, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(i + 1).copied().unwrap_or(0);
        let eps = model.predict_eps(&x, t, cond, sched).map_err(non_finite(t))?;

        let active: Vec<(&GuidanceTerm, f64)> = if cfg.policy.is_active(t) {
            cfg.terms
                .iter()
                .map(|term| Ok((term, term.effective_rho(t, sched)?)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|(_, rho)| *rho > 0.0)
                .collect()
        } else {
            Vec::new()
        };

        let needs_x0 = !active.is_empty() || cfg.record_trajectory;
        let x0 = if needs_x0 {
            Some(predict_x0(&x, &eps, t, sched).map_err(non_finite(t))?)
        } else {
            None
        };

        let mut grads = Vec::with_capacity(active.len());
        let mut losses = Vec::new();
        let mut grad_rms = Vec::new();
        for (term, rho) in &active {
            let x0 = x0.as_ref().expect("computed when terms are active");
            let grad_x0 = term.loss.gradient(x0)?;
            let grad_xt = pull_back_to_xt(&grad_x0, &x, t, cond, model, cfg.policy.jacobian, sched).map_err(non_finite(t))?;
            if cfg.record_trajectory {
                losses.push((term.name.clone(), term.loss.loss(x0)?));
                grad_rms.push(grad_xt.rms());
            }
            grads.push((*rho, grad_xt));
        }
        let eps_adj = adjust_noise(&eps, &grads, t, sched, &cfg.policy).map_err(non_finite(t))?;

        let sigma = sigmas[i];
        let z = (sigma > 0.0).then(|| rng.normal_grid(shape.0, shape.1));
        let next = ddim_step(&x, &eps_adj, t, t_prev, sigma, z.as_ref(), sched).map_err(non_finite(t))?;

        if cfg.record_trajectory {
            trajectory.steps.push(TrajectoryStep {
                t,
                x_t: x.clone(),
                x0_hat: x0.expect("computed when recording"),
                losses,
                grad_rms,
            });
        }
        x = next;
    }
    Ok((x, trajectory))
}

/// Runs `chains` independent chains in parallel; chain `i` uses stream `i`.
/// Returns unclamped final states in chain order.
pub fn sample_chains(
    model: &DenoiserModel,
    cond: Option<&ImageGrid>,
    shape: (usize, usize),
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    chains: usize,
) -> Result<Vec<ImageGrid>> {
    (0..chains)
        .into_par_iter()
        .map(|i| {
            let chain_cfg = SamplerConfig {
                stream: i as u64,
                record_trajectory: false,
                ..cfg.clone()
            };
            guided_sample_raw(model, cond, shape, &chain_cfg, sched).map(|(x, _)| x)
        })
        .collect()
}
