//! SGD-with-momentum training of the conv denoiser on the noise-prediction
//! objective, optionally with auxiliary priors on `x̂₀` added to the loss.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::ConvDenoiserParams;
use super::MIN_ALPHA_BAR;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::guidance::ReferenceLoss;
use crate::rng::Rng;
use crate::schedule::{forward_diffuse, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Side of the random square crop taken from each pair; `None` uses
    /// whole images.
    pub crop: Option<usize>,
    /// Global gradient-norm clip; `None` disables.
    pub grad_clip: Option<f64>,
    /// Timesteps are drawn from `1..=max_timestep`; `None` uses the whole
    /// schedule.
    pub max_timestep: Option<usize>,
    /// Set by the caller from the experiment seed; not read from files.
    #[serde(skip)]
    pub seed: u64,
    /// Reuse the first minibatch (images, crops, t, ε) at every iteration.
    pub fixed_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 4,
            crop: Some(32),
            grad_clip: Some(1.0),
            max_timestep: None,
            seed: 0,
            fixed_batch: false,
        }
    }
}

/// High-resolution target and its (upsampled) conditioning image.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub hr: ImageGrid,
    pub cond: Option<ImageGrid>,
}

/// A prior evaluated between the training target and the model's `x̂₀`,
/// added to the noise-prediction loss with `weight`.
#[derive(Debug, Clone)]
pub struct AuxiliaryLoss {
    pub weight: f64,
    pub prior: Arc<dyn ReferenceLoss>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ConvDenoiserParams,
    /// Mean minibatch objective at each iteration, measured before the update.
    pub loss_trace: Vec<f64>,
}

struct Sample {
    hr: ImageGrid,
    cond: Option<ImageGrid>,
    t: usize,
    eps: ImageGrid,
}

fn crop(img: &ImageGrid, top: usize, left: usize, size: usize) -> ImageGrid {
    let data = (top..top + size)
        .flat_map(|r| (left..left + size).map(move |c| (r, c)))
        .map(|(r, c)| img.get(r, c))
        .collect();
    ImageGrid::from_raw(size, size, data)
}

fn draw_batch(dataset: &[TrainingPair], cfg: &TrainConfig, sched: &NoiseSchedule, rng: &mut Rng) -> Vec<Sample> {
    (0..cfg.batch_size)
        .map(|_| {
            let pair = &dataset[rng.below(dataset.len())];
            let (hr, cond) = match cfg.crop {
                Some(size) if size < pair.hr.height() || size < pair.hr.width() => {
                    let top = rng.below(pair.hr.height() - size + 1);
                    let left = rng.below(pair.hr.width() - size + 1);
                    (crop(&pair.hr, top, left, size), pair.cond.as_ref().map(|c| crop(c, top, left, size)))
                }
                _ => (pair.hr.clone(), pair.cond.clone()),
            };
            let t = 1 + rng.below(cfg.max_timestep.unwrap_or(sched.num_steps()));
            let eps = rng.normal_grid(hr.height(), hr.width());
            Sample { hr, cond, t, eps }
        })
        .collect()
}

fn sample_objective(
    params: &ConvDenoiserParams,
    s: &Sample,
    sched: &NoiseSchedule,
    aux: &[AuxiliaryLoss],
) -> Result<(f64, Vec<f64>)> {
    let ab = sched.alpha_bar(s.t)?;
    let x_t = forward_diffuse(&s.hr, s.t, &s.eps, sched)?;
    let mut loss = 0.0;
    let (_, grads) = params.forward_backward(&x_t, s.t, ab, s.cond.as_ref(), |pred| {
        let n = pred.len() as f64;
        loss = pred.mse(&s.eps)?;
        let mut cot = pred.zip_map(&s.eps, |p, e| 2.0 * (p - e) / n)?;
        if !aux.is_empty() && ab >= MIN_ALPHA_BAR {
            // x̂₀ = (x_t − √(1−ᾱ)·ε̂)/√ᾱ, so ∂x̂₀/∂ε̂ = −√(1−ᾱ)/√ᾱ.
            let (inv, b) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt());
            let x0 = x_t.zip_map(pred, |x, e| (x - b * e) * inv)?;
            for a in aux {
                loss += a.weight * a.prior.loss(&s.hr, &x0)?;
                let g = a.prior.gradient(&s.hr, &x0)?;
                cot = cot.add_scaled(&g, -a.weight * b * inv)?;
            }
        }
        Ok(cot)
    })?;
    Ok((loss, grads.flatten()))
}

/// Trains `params` for `cfg.iterations` steps. Deterministic for a fixed
/// seed: minibatches are drawn sequentially and per-sample gradients are
/// reduced in batch order.
pub fn train_denoiser(
    params: ConvDenoiserParams,
    dataset: &[TrainingPair],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    aux: &[AuxiliaryLoss],
) -> Result<TrainOutcome> {
    params.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::Config("batch_size > 0, learning_rate >= 0 and momentum in [0, 1) required".into()));
    }
    if cfg.max_timestep.is_some_and(|m| m == 0 || m > sched.num_steps()) {
        return Err(Error::Config(format!("max_timestep must be in 1..={}", sched.num_steps())));
    }
    if params.arch.conditioned && dataset.iter().any(|p| p.cond.is_none()) {
        return Err(Error::MissingCondition);
    }
    for pair in dataset {
        if let Some(c) = &pair.cond {
            pair.hr.ensure_same_shape(c)?;
        }
        if let Some(size) = cfg.crop {
            if size == 0 || size > pair.hr.height() || size > pair.hr.width() {
                return Err(Error::Config(format!("crop {size} does not fit {:?}", pair.hr.shape())));
            }
        }
    }

    let mut params = params;
    let mut velocity = vec![0.0; params.num_params()];
    // Stream 1 keeps minibatch draws apart from weight initialization,
    // which uses stream 0 of the same seed.
    let mut rng = Rng::with_stream(cfg.seed, 1);
    let fixed = cfg.fixed_batch.then(|| draw_batch(dataset, cfg, sched, &mut rng));
    let mut trace = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let drawn;
        let batch = match &fixed {
            Some(b) => b,
            None => {
                drawn = draw_batch(dataset, cfg, sched, &mut rng);
                &drawn
            }
        };
        let results: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|s| sample_objective(&params, s, sched, aux))
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let loss: f64 = results.iter().map(|(l, _)| l).sum::<f64>() * scale;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration, loss });
        }
        let mut grad = vec![0.0; velocity.len()];
        for (_, g) in &results {
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v * scale;
            }
        }
        if let Some(limit) = cfg.grad_clip {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > limit {
                grad.iter_mut().for_each(|g| *g *= limit / norm);
            }
        }
        for ((p, v), g) in params.params_mut().into_iter().zip(velocity.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v + g;
            *p -= cfg.learning_rate * *v;
        }
        if params.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { iteration, loss: f64::NAN });
        }
        trace.push(loss);
    }
    Ok(TrainOutcome {
        params,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ConvArch;
    use crate::nn::Activation;
    use crate::schedule::ScheduleKind;

    fn tiny_arch() -> ConvArch {
        ConvArch {
            hidden_channels: 4,
            depth: 3,
            kernel: 3,
            embed_dim: 8,
            conditioned: false,
            activation: Activation::Silu,
            skip_variance: None,
        }
    }

    fn constant_set() -> Vec<TrainingPair> {
        vec![TrainingPair {
            hr: ImageGrid::filled(8, 8, 0.5),
            cond: None,
        }]
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 100, 1e-4, 0.02).unwrap();
        let p = ConvDenoiserParams::init(tiny_arch(), 1).unwrap();
        let cfg = TrainConfig { iterations: 0, crop: None, ..TrainConfig::default() };
        let out = train_denoiser(p.clone(), &constant_set(), &sched, &cfg, &[]).unwrap();
        assert_eq!(out.params, p);
        assert!(out.loss_trace.is_empty());
    }

    #[test]
    fn zero_learning_rate_with_fixed_batch_gives_flat_trace() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 100, 1e-4, 0.02).unwrap();
        let p = ConvDenoiserParams::init(tiny_arch(), 1).unwrap();
        let cfg = TrainConfig {
            iterations: 5,
            learning_rate: 0.0,
            crop: None,
            fixed_batch: true,
            ..TrainConfig::default()
        };
        let out = train_denoiser(p.clone(), &constant_set(), &sched, &cfg, &[]).unwrap();
        assert_eq!(out.params, p);
        assert!(out.loss_trace.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn constant_image_is_learnable() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 100, 1e-4, 0.02).unwrap();
        let p = ConvDenoiserParams::init(tiny_arch(), 3).unwrap();
        let cfg = TrainConfig {
            iterations: 500,
            crop: None,
            ..TrainConfig::default()
        };
        let out = train_denoiser(p, &constant_set(), &sched, &cfg, &[]).unwrap();
        let head: f64 = out.loss_trace[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = out.loss_trace[480..].iter().sum::<f64>() / 20.0;
        assert!(tail < 0.25 * head, "initial {head}, final {tail}");
    }

    #[test]
    fn huge_step_diverges() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 100, 1e-4, 0.02).unwrap();
        let p = ConvDenoiserParams::init(tiny_arch(), 3).unwrap();
        let cfg = TrainConfig {
            iterations: 200,
            learning_rate: 1e6,
            grad_clip: None,
            crop: None,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_denoiser(p, &constant_set(), &sched, &cfg, &[]),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn rejects_empty_dataset() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        let p = ConvDenoiserParams::init(tiny_arch(), 3).unwrap();
        assert!(train_denoiser(p, &[], &sched, &TrainConfig::default(), &[]).is_err());
    }

    #[test]
    fn rejects_timestep_cap_outside_schedule() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        for cap in [0, 11] {
            let p = ConvDenoiserParams::init(tiny_arch(), 3).unwrap();
            let cfg = TrainConfig { iterations: 1, max_timestep: Some(cap), ..TrainConfig::default() };
            assert!(matches!(train_denoiser(p, &constant_set(), &sched, &cfg, &[]), Err(Error::Config(_))));
        }
    }
}
