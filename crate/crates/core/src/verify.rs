//! Self-contained acceptance checks.
//!
//! Each `check_*` function builds its own fixtures from fixed seeds, runs
//! one family of oracles and returns a [`CheckResult`] with a one-line
//! detail and its wall-clock runtime. Errors raised inside a check are
//! reported as failures rather than propagated.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::config::{DatasetConfig, ExperimentConfig, GuidanceKind, GuidanceSpec};
use crate::denoiser::{predict_x0, AnalyticGaussianParams, ConvArch, ConvDenoiserParams, DenoiserModel};
use crate::error::Result;
use crate::experiment::{prepare, run_ablation, Aggregate, AblationRow};
use crate::fft::fft2;
use crate::grid::ImageGrid;
use crate::guidance::{
    adjust_noise, guidance_grad_xt, make_data_fidelity_term, make_identity_term, make_reference_term, noise_to_score, score_to_noise,
    GuidancePolicy, GuidanceTerm, JacobianMode,
};
use crate::oracle::{central_difference, perceptual_loss_reference, relative_error, ssim_reference, visual_loss_reference};
use crate::perceptual::{weighted_perceptual_loss, weighted_perceptual_loss_grad, FeatureExtractor, PerceptualWeights, SoftSegmenter};
use crate::pipeline::{ssim_with_peak, DegradationModel, KernelSpec};
use crate::rng::Rng;
use crate::sampler::{ddim_step, guided_sample_from_noise, guided_sample_raw, sample_chains, InitMode, SamplerConfig};
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::visual::{magnitude_spectrum, normalize_spectrum, visual_loss, visual_loss_grad, SpectralLossConfig, VisualPrior};

/// Relative error allowed between analytic and finite-difference gradients.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Random instances per gradient family.
pub const FD_INSTANCES: usize = 20;
/// Agreement required between library code and straight-line transcriptions.
pub const DUAL_TOLERANCE: f64 = 1e-10;
/// Tolerance for closed-form identities.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;
/// ρ values tried by the guidance-efficacy sweep.
pub const RHO_SWEEP: [f64; 5] = [0.1, 0.3, 1.0, 3.0, 10.0];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub runtime: Duration,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {} ({:.2}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.runtime.as_secs_f64(),
            self.detail
        )
    }
}

/// Runs `body`, timing it and turning an error into a failed result.
pub fn run_check(name: &str, body: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok(outcome) => outcome,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        runtime: start.elapsed(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let total: f64 = self.checks.iter().map(|c| c.runtime.as_secs_f64()).sum();
        let failed = self.failures();
        write!(f, "{} checks, {} failed, {total:.2}s total", self.checks.len(), failed.len())?;
        if !failed.is_empty() {
            write!(f, " ({})", failed.join(", "))?;
        }
        Ok(())
    }
}

/// One gradient family: a scalar function, its claimed gradient and the
/// points to test.
pub struct GradientCase<'a> {
    pub name: String,
    pub f: Box<dyn Fn(&ImageGrid) -> Result<f64> + 'a>,
    pub grad: Box<dyn Fn(&ImageGrid) -> Result<ImageGrid> + 'a>,
    pub points: Vec<ImageGrid>,
}

/// Worst relative error of `case` over its points, and whether it is within
/// [`FD_TOLERANCE`].
pub fn fd_check(case: &GradientCase) -> Result<(bool, f64)> {
    let mut worst: f64 = 0.0;
    for x in &case.points {
        let fd = central_difference(&case.f, x, FD_STEP)?;
        let analytic = (case.grad)(x)?;
        worst = worst.max(relative_error(&analytic, &fd, 1e-8)?);
    }
    Ok((worst < FD_TOLERANCE, worst))
}

fn random_pairs(seed: u64, n: usize, h: usize, w: usize) -> Vec<(ImageGrid, ImageGrid)> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            // Kept inside (0.05, 0.95) so the segmenter's [0, 1] clamp is
            // never within a finite-difference step.
            let a = rng.uniform_grid(h, w).map(|v| 0.05 + 0.9 * v).expect("finite");
            let b = rng.uniform_grid(h, w).map(|v| 0.05 + 0.9 * v).expect("finite");
            (a, b)
        })
        .collect()
}

fn perturbed_conv(seed: u64, conditioned: bool) -> Result<ConvDenoiserParams> {
    let arch = ConvArch {
        hidden_channels: 6,
        depth: 3,
        conditioned,
        ..ConvArch::default()
    };
    let mut p = ConvDenoiserParams::init(arch, seed)?;
    let mut rng = Rng::with_stream(seed, 7);
    for v in p.params_mut() {
        *v += 0.1 * rng.normal();
    }
    Ok(p)
}

fn gradient_cases<'a>(
    reference: &'a ImageGrid,
    fe: &'a FeatureExtractor,
    seg: &'a SoftSegmenter,
    points: &[ImageGrid],
) -> Result<Vec<GradientCase<'a>>> {
    let vcfg = SpectralLossConfig::default();
    let w = PerceptualWeights::default();
    let degrade = DegradationModel::new(2, KernelSpec::Gaussian { size: 3, std: 0.8 }, 0.0)?;
    let lr = degrade.apply_linear(reference)?;
    let fidelity = make_data_fidelity_term(lr, degrade, 1.0)?;
    let fid_loss = fidelity.loss.clone();
    let fid_grad = fidelity.loss;
    Ok(vec![
        GradientCase {
            name: "visual_loss_grad".into(),
            f: Box::new(move |x| visual_loss(reference, x, &vcfg)),
            grad: Box::new(move |x| visual_loss_grad(reference, x, &vcfg)),
            points: points.to_vec(),
        },
        GradientCase {
            name: "perceptual_loss_grad".into(),
            f: Box::new(move |x| weighted_perceptual_loss(reference, x, fe, seg, w)),
            grad: Box::new(move |x| weighted_perceptual_loss_grad(reference, x, fe, seg, w)),
            points: points.to_vec(),
        },
        GradientCase {
            name: "data_fidelity_grad".into(),
            f: Box::new(move |x| fid_loss.loss(x)),
            grad: Box::new(move |x| fid_grad.gradient(x)),
            points: points.to_vec(),
        },
    ])
}

/// Gradient of `term` at `x_t` through `model`, as a [`GradientCase`]; in
/// detached mode ε is frozen at its value at each test point.
fn guidance_case<'a>(
    name: String,
    term: &'a GuidanceTerm,
    model: &'a DenoiserModel,
    cond: Option<&'a ImageGrid>,
    mode: JacobianMode,
    t: usize,
    sched: &'a NoiseSchedule,
    points: Vec<ImageGrid>,
) -> Result<Vec<GradientCase<'a>>> {
    let policy = GuidancePolicy {
        jacobian: mode,
        clip_rms: None,
        window: None,
    };
    match mode {
        JacobianMode::ThroughDenoiser => Ok(vec![GradientCase {
            name,
            f: Box::new(move |x| {
                let eps = model.predict_eps(x, t, cond, sched)?;
                term.loss.loss(&predict_x0(x, &eps, t, sched)?)
            }),
            grad: Box::new(move |x| {
                let eps = model.predict_eps(x, t, cond, sched)?;
                guidance_grad_xt(term, x, &eps, t, cond, model, &policy, sched)
            }),
            points,
        }]),
        JacobianMode::X0Detached => points
            .into_iter()
            .map(|p| {
                let eps = model.predict_eps(&p, t, cond, sched)?;
                let eps_grad = eps.clone();
                Ok(GradientCase {
                    name: name.clone(),
                    f: Box::new(move |x| term.loss.loss(&predict_x0(x, &eps, t, sched)?)),
                    grad: Box::new(move |x| guidance_grad_xt(term, x, &eps_grad, t, cond, model, &policy, sched)),
                    points: vec![p],
                })
            })
            .collect(),
    }
}

/// Analytic gradients of every guidance loss and of `∇_{x_t}` in both
/// Jacobian modes and for both denoiser backends, against central
/// differences on random 8×8 instances.
pub fn check_gradient_oracles() -> CheckResult {
    check_gradients_with("gradient_oracles", |_, g| Ok(g))
}

/// As [`check_gradient_oracles`] but with every analytic gradient passed
/// through `corrupt` first; used to show the harness catches bad
/// gradients.
pub fn check_gradients_with(name: &str, corrupt: impl Fn(&str, ImageGrid) -> Result<ImageGrid>) -> CheckResult {
    run_check(name, || {
        let (h, w) = (8, 8);
        let pairs = random_pairs(0xF1D0, FD_INSTANCES, h, w);
        let reference = pairs[0].0.clone();
        let points: Vec<ImageGrid> = pairs.iter().map(|(_, b)| b.clone()).collect();
        let fe = FeatureExtractor::default();
        let seg = SoftSegmenter::default();

        let sched = NoiseSchedule::default_linear();
        let t = 200;
        let mut rng = Rng::new(0x6EAD);
        let mu = rng.uniform_grid(h, w);
        let cond = rng.uniform_grid(h, w);
        let analytic = DenoiserModel::AnalyticGaussian(AnalyticGaussianParams::new(mu, 0.3)?);
        let conv = DenoiserModel::Conv(perturbed_conv(11, true)?);
        let visual_term = make_reference_term(reference.clone(), Arc::new(VisualPrior::default()), 1.0)?;
        let xt_points: Vec<ImageGrid> = (0..FD_INSTANCES).map(|_| rng.normal_grid(h, w)).collect();

        let mut cases = gradient_cases(&reference, &fe, &seg, &points)?;
        for (label, model, c) in [("analytic", &analytic, None), ("conv", &conv, Some(&cond))] {
            for (mode_label, mode) in [("through_denoiser", JacobianMode::ThroughDenoiser), ("x0_detached", JacobianMode::X0Detached)] {
                let name = format!("guidance_grad_xt[{label},{mode_label}]");
                cases.extend(guidance_case(name, &visual_term, model, c, mode, t, &sched, xt_points.clone())?);
            }
        }

        let mut worst = std::collections::BTreeMap::<&str, f64>::new();
        for case in &cases {
            let corrupted = GradientCase {
                name: case.name.clone(),
                f: Box::new(|x| (case.f)(x)),
                grad: Box::new(|x| corrupt(&case.name, (case.grad)(x)?)),
                points: case.points.clone(),
            };
            let (_, err) = fd_check(&corrupted)?;
            let entry = worst.entry(case.name.as_str()).or_insert(0.0);
            *entry = entry.max(err);
        }
        let failed: Vec<&str> = worst.iter().filter(|(_, e)| **e >= FD_TOLERANCE).map(|(n, _)| *n).collect();
        let summary = worst.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect::<Vec<_>>().join(" ");
        if failed.is_empty() {
            Ok((true, format!("max rel err < {FD_TOLERANCE:.0e} on {FD_INSTANCES} instances each: {summary}")))
        } else {
            Ok((false, format!("failed: {}; {summary}", failed.join(", "))))
        }
    })
}

/// Confirms that a 1% gradient corruption is caught and named.
pub fn check_harness_self_test() -> CheckResult {
    run_check("harness_self_test", || {
        let inner = check_gradients_with("corrupted_visual_gradient", |name, g| {
            if name == "visual_loss_grad" {
                g.scale(1.01)
            } else {
                Ok(g)
            }
        });
        let caught = !inner.passed && inner.detail.contains("failed: visual_loss_grad");
        Ok((caught, format!("corrupted visual gradient reported as: {}", inner.detail)))
    })
}

fn pixel_moments(samples: &[ImageGrid]) -> (ImageGrid, ImageGrid) {
    let n = samples.len() as f64;
    let (h, w) = samples[0].shape();
    let mean: Vec<f64> = (0..h * w).map(|i| samples.iter().map(|s| s.data()[i]).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..h * w)
        .map(|i| samples.iter().map(|s| (s.data()[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    (
        ImageGrid::new(h, w, mean).expect("finite"),
        ImageGrid::new(h, w, var).expect("finite"),
    )
}

/// Initial noise for `n` chains, moment-matched per pixel: across chains
/// every pixel has sample mean 0 and sample variance 1.
pub fn moment_matched_noise(seed: u64, n: usize, h: usize, w: usize) -> Vec<ImageGrid> {
    let raw: Vec<ImageGrid> = (0..n).map(|i| Rng::with_stream(seed, i as u64).normal_grid(h, w)).collect();
    let (mean, var) = pixel_moments(&raw);
    raw.iter()
        .map(|z| {
            let data = (0..h * w).map(|p| (z.data()[p] - mean.data()[p]) / var.data()[p].sqrt()).collect();
            ImageGrid::new(h, w, data).expect("finite")
        })
        .collect()
}

/// Unguided deterministic sampling of the analytic Gaussian model against
/// its known mean and variance.
///
/// At `eta = 0` the sampler is a deterministic map of its initial noise, so
/// the gated statistics use moment-matched initial noise: sample-to-sample
/// noise in the mean then cancels and the check measures the sampler, not
/// the Monte-Carlo error. Statistics for independent draws are reported
/// alongside.
pub fn check_analytic_sampler() -> CheckResult {
    run_check("analytic_sampler", || {
        const CHAINS: usize = 1000;
        let sched = NoiseSchedule::default_linear();
        let mu = Rng::new(0xA11).uniform_grid(8, 8);
        let cfg = SamplerConfig {
            num_steps: 100,
            seed: 0x5A,
            ..SamplerConfig::default()
        };
        let noise = moment_matched_noise(0x5B, CHAINS, 8, 8);
        let mut ok = true;
        let mut parts = Vec::new();
        for sigma2 in [0.0, 0.25, 1.0] {
            let model = DenoiserModel::AnalyticGaussian(AnalyticGaussianParams::new(mu.clone(), sigma2)?);
            let samples = noise
                .par_iter()
                .map(|z| guided_sample_from_noise(&model, None, z.clone(), &cfg, &sched).map(|(x, _)| x))
                .collect::<Result<Vec<_>>>()?;
            let (mean, var) = pixel_moments(&samples);
            let mean_err = mean.max_abs_diff(&mu)?;
            let iid = sample_chains(&model, None, (8, 8), &cfg, &sched, CHAINS)?;
            let (iid_mean, iid_var) = pixel_moments(&iid);
            let iid_mean_err = iid_mean.max_abs_diff(&mu)?;
            ok &= mean_err < 0.05;
            if sigma2 == 0.0 {
                let mse = samples.iter().map(|s| s.mse(&mu)).sum::<Result<f64>>()? / samples.len() as f64;
                ok &= mse < 1e-3;
                parts.push(format!("σ²=0: mean err {mean_err:.2e}, mse {mse:.2e}"));
            } else {
                let dev = |v: &ImageGrid| v.data().iter().fold(0.0f64, |m, x| m.max((x / sigma2 - 1.0).abs()));
                let worst = dev(&var);
                ok &= worst < 0.15;
                parts.push(format!(
                    "σ²={sigma2}: mean err {mean_err:.2e}, worst var dev {:.2}% (independent draws: mean err {iid_mean_err:.3}, var dev {:.1}%)",
                    100.0 * worst,
                    100.0 * dev(&iid_var)
                ));
            }
        }
        Ok((ok, parts.join("; ")))
    })
}

/// Mean final-sample MSE to `target` over `chains` chains.
fn mean_mse_to(model: &DenoiserModel, cfg: &SamplerConfig, sched: &NoiseSchedule, target: &ImageGrid, chains: usize) -> Result<f64> {
    let samples = sample_chains(model, None, target.shape(), cfg, sched, chains)?;
    Ok(samples.iter().map(|s| s.mse(target)).sum::<Result<f64>>()? / chains as f64)
}

/// Result of the identity-guidance ρ sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficacySweep {
    pub unguided_mse: f64,
    /// `(ρ, guided MSE / unguided MSE)` for each swept value.
    pub ratios: Vec<(f64, f64)>,
    pub selected_rho: f64,
    pub selected_ratio: f64,
}

pub fn guidance_efficacy_sweep(chains: usize) -> Result<EfficacySweep> {
    let sched = NoiseSchedule::default_linear();
    let mut rng = Rng::new(0xEF1);
    let mu = rng.uniform_grid(8, 8);
    let target = rng.uniform_grid(8, 8);
    let model = DenoiserModel::AnalyticGaussian(AnalyticGaussianParams::new(mu, 0.25)?);
    let base = SamplerConfig {
        num_steps: 100,
        seed: 0xEF2,
        ..SamplerConfig::default()
    };
    let unguided_mse = mean_mse_to(&model, &base, &sched, &target, chains)?;
    let mut ratios = Vec::with_capacity(RHO_SWEEP.len());
    for rho in RHO_SWEEP {
        let cfg = SamplerConfig {
            terms: vec![make_identity_term(target.clone(), rho)?],
            ..base.clone()
        };
        ratios.push((rho, mean_mse_to(&model, &cfg, &sched, &target, chains)? / unguided_mse));
    }
    let (selected_rho, selected_ratio) = ratios
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty sweep");
    Ok(EfficacySweep {
        unguided_mse,
        ratios,
        selected_rho,
        selected_ratio,
    })
}

/// Identity guidance toward a known target on the analytic model must at
/// least halve the mean MSE at the best swept ρ.
pub fn check_guidance_efficacy() -> CheckResult {
    run_check("guidance_efficacy", || {
        let s = guidance_efficacy_sweep(200)?;
        let sweep = s.ratios.iter().map(|(r, q)| format!("ρ={r}: {q:.3}")).collect::<Vec<_>>().join(", ");
        Ok((
            s.selected_ratio <= 0.5,
            format!("selected ρ={} ratio {:.4} (unguided mse {:.4}; {sweep})", s.selected_rho, s.selected_ratio, s.unguided_mse),
        ))
    })
}

/// Shift invariance, Parseval, standardization contracts and the constant
/// image case of the spectral loss.
pub fn check_spectral_invariants() -> CheckResult {
    run_check("spectral_invariants", || {
        let cfg = SpectralLossConfig::default();
        let mut rng = Rng::new(0x5BEC);
        let mut worst_shift: f64 = 0.0;
        let mut worst_parseval: f64 = 0.0;
        for _ in 0..3 {
            let x = rng.uniform_grid(16, 16);
            for dy in 0..16 {
                for dx in 0..16 {
                    worst_shift = worst_shift.max(visual_loss(&x, &x.roll(dy, dx), &cfg)?);
                }
            }
            let energy = x.norm_sq();
            let spectral: f64 = fft2(&x).data().iter().map(|c| c.norm_sqr()).sum::<f64>() / x.len() as f64;
            worst_parseval = worst_parseval.max((spectral - energy).abs() / energy);
        }
        let m = magnitude_spectrum(&rng.uniform_grid(16, 16));
        let n = normalize_spectrum(&m, &cfg);
        let (mean_dev, std_dev) = (n.mean().abs(), (n.std() - 1.0).abs());
        let constant = ImageGrid::filled(16, 16, 0.4);
        let hr = rng.uniform_grid(16, 16);
        let loss = visual_loss(&hr, &constant, &cfg)?;
        let grad = visual_loss_grad(&hr, &constant, &cfg)?;
        let normalized_constant = normalize_spectrum(&ImageGrid::filled(4, 4, 2.5), &cfg);
        let ok = worst_shift < 1e-12
            && worst_parseval < 1e-9
            && mean_dev < 1e-12
            && std_dev < 1e-6
            && normalized_constant.max_abs() == 0.0
            && loss.is_finite()
            && grad.data().iter().all(|v| v.is_finite());
        Ok((
            ok,
            format!(
                "shift max {worst_shift:.1e}, parseval rel {worst_parseval:.1e}, normalized mean {mean_dev:.1e} std-1 {std_dev:.1e}, constant-image loss {loss:.4}"
            ),
        ))
    })
}

/// Closed-form identities of the forward process, score conversion, DDIM
/// terminal step and noise adjustment.
pub fn check_algebraic_identities() -> CheckResult {
    run_check("algebraic_identities", || {
        let sched = NoiseSchedule::default_linear();
        let mut rng = Rng::new(0xA1E);
        let x0 = rng.uniform_grid(8, 8);
        let eps = rng.normal_grid(8, 8);
        let mut worst: f64 = 0.0;
        for t in [1, 10, 250, 500, 900] {
            let xt = forward_diffuse(&x0, t, &eps, &sched)?;
            worst = worst.max(predict_x0(&xt, &eps, t, &sched)?.max_abs_diff(&x0)?);
            let back = score_to_noise(&noise_to_score(&eps, t, &sched)?, t, &sched)?;
            worst = worst.max(back.max_abs_diff(&eps)?);
            let collapsed = ddim_step(&xt, &eps, t, 0, 0.0, None, &sched)?;
            worst = worst.max(collapsed.max_abs_diff(&predict_x0(&xt, &eps, t, &sched)?)?);
        }

        let policy = GuidancePolicy {
            clip_rms: None,
            ..GuidancePolicy::default()
        };
        let g1 = rng.normal_grid(8, 8);
        let g2 = rng.normal_grid(8, 8);
        let t = 300;
        let zero_rho = adjust_noise(&eps, &[(0.0, g1.clone())], t, &sched, &policy)? == eps;
        let both = adjust_noise(&eps, &[(0.7, g1.clone()), (1.9, g2.clone())], t, &sched, &policy)?.sub(&eps)?;
        let one = adjust_noise(&eps, &[(0.7, g1)], t, &sched, &policy)?.sub(&eps)?;
        let two = adjust_noise(&eps, &[(1.9, g2)], t, &sched, &policy)?.sub(&eps)?;
        let linearity = both.max_abs_diff(&one.add(&two)?)?;

        let model = DenoiserModel::AnalyticGaussian(AnalyticGaussianParams::new(x0.clone(), 0.2)?);
        let plain = SamplerConfig {
            num_steps: 20,
            seed: 3,
            ..SamplerConfig::default()
        };
        let with_zero = SamplerConfig {
            terms: vec![make_identity_term(rng.uniform_grid(8, 8), 0.0)?],
            ..plain.clone()
        };
        let sampler_noop = guided_sample_raw(&model, None, (8, 8), &plain, &sched)?.0 == guided_sample_raw(&model, None, (8, 8), &with_zero, &sched)?.0;

        let ok = worst < IDENTITY_TOLERANCE && linearity < IDENTITY_TOLERANCE && zero_rho && sampler_noop;
        Ok((
            ok,
            format!("round trips {worst:.1e}, linearity {linearity:.1e}, ρ=0 bitwise no-op: adjust {zero_rho}, sampler {sampler_noop}"),
        ))
    })
}

/// Library implementations against the straight-line transcriptions in
/// [`crate::oracle`].
pub fn check_dual_implementations() -> CheckResult {
    run_check("dual_implementations", || {
        let mut rng = Rng::new(0xD0A1);
        let vcfg = SpectralLossConfig::default();
        let fe = FeatureExtractor::default();
        let seg = SoftSegmenter::default();
        let w = PerceptualWeights {
            feature: 1.0,
            segmentation: 0.5,
        };
        let (mut v_err, mut p_err, mut s_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for (h, wd) in [(8, 8), (6, 10), (9, 7)] {
            let a = rng.uniform_grid(h, wd);
            let b = rng.uniform_grid(h, wd).map(|v| 1.3 * v - 0.15)?;
            v_err = v_err.max((visual_loss(&a, &b, &vcfg)? - visual_loss_reference(&a, &b, vcfg.eps_log, vcfg.eps_std)).abs());
            p_err = p_err.max((weighted_perceptual_loss(&a, &b, &fe, &seg, w)? - perceptual_loss_reference(&a, &b, &fe, &seg, w)).abs());
        }
        for (h, wd, peak) in [(8, 8, 1.0), (12, 9, 1.0), (16, 16, 2.0)] {
            let a = rng.uniform_grid(h, wd).scale(peak)?;
            let b = a.add(&rng.normal_grid(h, wd).scale(0.1 * peak)?)?;
            s_err = s_err.max((ssim_with_peak(&a, &b, peak)? - ssim_reference(&a, &b, peak)).abs());
        }
        let ok = v_err < DUAL_TOLERANCE && p_err < DUAL_TOLERANCE && s_err < DUAL_TOLERANCE;
        Ok((ok, format!("visual {v_err:.1e}, perceptual {p_err:.1e}, ssim {s_err:.1e}")))
    })
}

/// `⟨D x, y⟩ = ⟨x, Dᵀ y⟩` for the blur + pool map.
pub fn check_degradation_adjoint() -> CheckResult {
    run_check("degradation_adjoint", || {
        let configs = [
            (16, 16, DegradationModel::new(4, KernelSpec::Gaussian { size: 5, std: 1.0 }, 0.0)?),
            (12, 18, DegradationModel::new(3, KernelSpec::Box { size: 3 }, 0.0)?),
            (10, 14, DegradationModel::new(2, KernelSpec::Gaussian { size: 7, std: 1.5 }, 0.0)?),
        ];
        let mut rng = Rng::new(0xAD7);
        let mut worst: f64 = 0.0;
        for (h, w, d) in &configs {
            let (lh, lw) = d.lr_shape((*h, *w))?;
            for _ in 0..50 {
                let x = rng.normal_grid(*h, *w);
                let y = rng.normal_grid(lh, lw);
                let lhs = d.apply_linear(&x)?.dot(&y)?;
                let rhs = x.dot(&d.adjoint(&y)?)?;
                worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
            }
        }
        Ok((worst < DUAL_TOLERANCE, format!("150 pairs over 3 configurations, worst {worst:.1e}")))
    })
}

/// A deliberately small end-to-end config used by the determinism check.
pub fn tiny_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    cfg.dataset = DatasetConfig::Synthetic {
        train_images: 4,
        test_images: 2,
        size: 16,
    };
    cfg.model.hidden_channels = 6;
    cfg.model.depth = 3;
    cfg.train.iterations = 20;
    cfg.train.batch_size = 2;
    cfg.train.crop = Some(16);
    cfg.sampler.num_steps = 10;
    cfg.guidance = vec![
        GuidanceSpec::new(GuidanceKind::Visual, 0.5),
        GuidanceSpec::new(GuidanceKind::Perceptual, 0.5),
        GuidanceSpec::new(GuidanceKind::DataFidelity, 0.5),
    ];
    cfg
}

/// Two in-memory train + sample runs with the same config and seed must
/// agree bit for bit.
pub fn check_determinism() -> CheckResult {
    run_check("determinism", || {
        let cfg = tiny_config(42);
        let run = || -> Result<(String, Vec<ImageGrid>)> {
            let prep = prepare(&cfg)?;
            let params = prep.train(prep.initial_params()?, cfg.train.iterations, &[])?.params;
            let json = crate::checkpoint::WeightsFile::new(crate::checkpoint::WeightsPayload::ConvDenoiser(params.clone())).to_json();
            let out = prep.super_resolve(&params, &cfg.guidance, true)?.into_iter().map(|(x, _)| x).collect();
            Ok((json, out))
        };
        let (a, b) = (run()?, run()?);
        let same = a == b;
        Ok((same, format!("checkpoints and {} outputs identical: {same}", a.1.len())))
    })
}

/// Configuration for the end-to-end toy super-resolution experiment.
pub fn toy_sr_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    cfg.dataset = DatasetConfig::Synthetic {
        train_images: 32,
        test_images: 16,
        size: 64,
    };
    cfg.train.iterations = 2000;
    cfg.train.max_timestep = Some(10);
    cfg.sampler.init = InitMode::LrPlusNoise;
    cfg.sampler.start_step = Some(TOY_START_STEP);
    cfg.sampler.num_steps = TOY_START_STEP;
    cfg.ablation.rho_visual = TOY_RHO_VISUAL;
    cfg.ablation.rho_perceptual = TOY_RHO_PERCEPTUAL;
    cfg.guidance = toy_rhos().into_iter().map(|(k, r)| GuidanceSpec::new(k, r)).collect();
    cfg
}

/// Short chain entered from upsampled LR plus a small amount of noise.
pub const TOY_START_STEP: usize = 3;
pub const TOY_RHO_VISUAL: f64 = 2e4;
pub const TOY_RHO_PERCEPTUAL: f64 = 1e6;
pub const TOY_RHO_DATA_FIDELITY: f64 = 1e5;

/// Methods compared by the toy SR experiment, in report order.
pub const TOY_METHODS: [&str; 6] = ["unguided", "visual", "perceptual", "data_fidelity", "visual+perceptual", "visual+perceptual+data_fidelity"];

/// Aggregate metrics per method, bicubic first.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySrReport {
    pub rows: Vec<(String, Aggregate)>,
    pub train_initial_loss: f64,
    pub train_final_loss: f64,
}

impl ToySrReport {
    pub fn get(&self, method: &str) -> Option<Aggregate> {
        self.rows.iter().find(|(m, _)| m == method).map(|(_, a)| *a)
    }
}

fn toy_specs(method: &str, rho: &[(GuidanceKind, f64)]) -> Vec<GuidanceSpec> {
    rho.iter()
        .filter(|(k, _)| method.split('+').any(|m| m == k.label()))
        .map(|(k, r)| GuidanceSpec::new(*k, *r))
        .collect()
}

/// Guidance strengths used by the toy experiment per term.
pub fn toy_rhos() -> Vec<(GuidanceKind, f64)> {
    vec![
        (GuidanceKind::Visual, TOY_RHO_VISUAL),
        (GuidanceKind::Perceptual, TOY_RHO_PERCEPTUAL),
        (GuidanceKind::DataFidelity, TOY_RHO_DATA_FIDELITY),
    ]
}

pub fn run_toy_sr(cfg: &ExperimentConfig) -> Result<ToySrReport> {
    let prep = prepare(cfg)?;
    let outcome = prep.train(prep.initial_params()?, cfg.train.iterations, &[])?;
    let window = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    let k = outcome.loss_trace.len().min(50);
    let trace = &outcome.loss_trace;
    let mut rows = vec![("bicubic".to_string(), Aggregate::of(&prep.evaluate(&prep.bicubic_outputs())?))];
    let rhos = toy_rhos();
    for method in TOY_METHODS {
        let outputs: Vec<ImageGrid> = prep
            .super_resolve(&outcome.params, &toy_specs(method, &rhos), false)?
            .into_iter()
            .map(|(x, _)| x)
            .collect();
        rows.push((method.to_string(), Aggregate::of(&prep.evaluate(&outputs)?)));
    }
    Ok(ToySrReport {
        rows,
        train_initial_loss: window(&trace[..k]),
        train_final_loss: window(&trace[trace.len() - k..]),
    })
}

/// The three directional claims of the toy SR experiment.
pub fn judge_toy_sr(report: &ToySrReport) -> (bool, String) {
    let bicubic = report.get("bicubic").expect("bicubic row");
    let unguided = report.get("unguided").expect("unguided row");
    let full = report.get("visual+perceptual+data_fidelity").expect("full row");
    let visual = report.get("visual").expect("visual row");
    let below: Vec<&str> = report
        .rows
        .iter()
        .filter(|(m, a)| m != "bicubic" && m != "unguided" && a.psnr < bicubic.psnr)
        .map(|(m, _)| m.as_str())
        .collect();
    let a = below.is_empty();
    let b = full.psnr >= unguided.psnr;
    let c = visual.visual_loss < unguided.visual_loss;
    let table = report
        .rows
        .iter()
        .map(|(m, g)| format!("{m}: {:.2} dB / {:.3} / {:.4}", g.psnr, g.ssim, g.visual_loss))
        .collect::<Vec<_>>()
        .join("; ");
    (
        a && b && c,
        format!(
            "(a) guided >= bicubic: {a}{} (b) full >= unguided: {b} (c) visual lowers visual loss: {c} | psnr/ssim/visual_loss {table}",
            if a { String::new() } else { format!(" [below: {}]", below.join(", ")) }
        ),
    )
}

pub fn check_toy_sr(cfg: &ExperimentConfig) -> CheckResult {
    run_check("toy_sr", || {
        let report = run_toy_sr(cfg)?;
        let (ok, detail) = judge_toy_sr(&report);
        Ok((
            ok,
            format!(
                "{detail} | train loss {:.4} -> {:.4}",
                report.train_initial_loss, report.train_final_loss
            ),
        ))
    })
}

/// Six-row ablation with a shared seed; the injection-mode direction is
/// reported, not gated.
pub fn judge_ablation(rows: &[AblationRow], seed: u64) -> (bool, String) {
    let shape_ok = rows.len() == 6
        && rows.iter().all(|r| r.seed == seed)
        && rows.iter().filter(|r| r.group == "combination").count() == 4
        && rows.iter().filter(|r| r.group == "injection").count() == 2;
    let find = |group: &str, cell: &str, inj: &str| rows.iter().find(|r| r.group == group && r.cell == cell && r.injection == inj);
    let mut detail = rows
        .iter()
        .map(|r| format!("{}/{}/{}: {:.2} dB", r.group, r.cell, r.injection, r.psnr))
        .collect::<Vec<_>>()
        .join("; ");
    if let (Some(g), Some(l)) = (find("injection", "both", "grad_in_noise"), find("injection", "both", "loss_in_training")) {
        detail.push_str(&format!(
            " | grad_in_noise {} loss_in_training ({:+.3} dB)",
            if g.psnr >= l.psnr { ">=" } else { "<" },
            g.psnr - l.psnr
        ));
    }
    if let (Some(b), Some(n)) = (find("combination", "both", "grad_in_noise"), find("combination", "none", "grad_in_noise")) {
        detail.push_str(&format!(" | both {} none", if b.psnr >= n.psnr { ">=" } else { "<" }));
    }
    (shape_ok, detail)
}

pub fn check_ablation(cfg: &ExperimentConfig, out: &std::path::Path) -> CheckResult {
    run_check("ablation", || {
        let rows = run_ablation(cfg, out)?;
        Ok(judge_ablation(&rows, cfg.seed))
    })
}

/// The fast suite run by `verify`.
pub fn run_verify() -> VerifyReport {
    VerifyReport {
        checks: vec![
            check_gradient_oracles(),
            check_harness_self_test(),
            check_analytic_sampler(),
            check_guidance_efficacy(),
            check_spectral_invariants(),
            check_algebraic_identities(),
            check_dual_implementations(),
            check_degradation_adjoint(),
            check_determinism(),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_formatting_names_failures() {
        let report = VerifyReport {
            checks: vec![
                run_check("good", || Ok((true, "fine".into()))),
                run_check("bad", || Err(crate::error::Error::Config("boom".into()))),
            ],
        };
        assert!(!report.passed());
        assert_eq!(report.failures(), vec!["bad"]);
        let text = report.to_string();
        assert!(text.contains("[FAIL] bad") && text.contains("boom") && text.contains("1 failed"));
    }

    #[test]
    fn toy_specs_follow_method_names() {
        let specs = toy_specs("visual+data_fidelity", &toy_rhos());
        let kinds: Vec<GuidanceKind> = specs.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, vec![GuidanceKind::Visual, GuidanceKind::DataFidelity]);
        assert!(toy_specs("unguided", &toy_rhos()).is_empty());
    }
}
