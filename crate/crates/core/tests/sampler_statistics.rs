//! Monte-Carlo behaviour of the sampler on the closed-form Gaussian model.

use gdsr_core::denoiser::{AnalyticGaussianParams, DenoiserModel};
use gdsr_core::sampler::{guided_sample_from_noise, sample_chains, SamplerConfig};
use gdsr_core::schedule::NoiseSchedule;
use gdsr_core::verify::{guidance_efficacy_sweep, moment_matched_noise};
use gdsr_core::{ImageGrid, Rng};

fn pixel_stats(samples: &[ImageGrid]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let len = samples[0].len();
    let mean: Vec<f64> = (0..len).map(|p| samples.iter().map(|s| s.data()[p]).sum::<f64>() / n).collect();
    let var = (0..len)
        .map(|p| samples.iter().map(|s| (s.data()[p] - mean[p]).powi(2)).sum::<f64>() / n)
        .collect();
    (mean, var)
}

fn model(sigma2: f64) -> (DenoiserModel, ImageGrid) {
    let mu = Rng::new(11).uniform_grid(4, 4);
    (DenoiserModel::AnalyticGaussian(AnalyticGaussianParams::new(mu.clone(), sigma2).unwrap()), mu)
}

#[test]
fn guidance_gets_closer_as_rho_grows() {
    let sweep = guidance_efficacy_sweep(60).unwrap();
    for pair in sweep.ratios.windows(2) {
        assert!(pair[1].1 <= pair[0].1, "ratios not monotone: {:?}", sweep.ratios);
    }
    assert!(sweep.ratios[0].1 < 1.0);
}

#[test]
fn finer_grids_match_the_target_variance_at_least_as_well() {
    let sched = NoiseSchedule::default_linear();
    let (m, _) = model(0.25);
    let noise = moment_matched_noise(3, 400, 4, 4);
    let worst_dev = |steps: usize| {
        let cfg = SamplerConfig { num_steps: steps, ..SamplerConfig::default() };
        let samples: Vec<ImageGrid> = noise
            .iter()
            .map(|z| guided_sample_from_noise(&m, None, z.clone(), &cfg, &sched).unwrap().0)
            .collect();
        pixel_stats(&samples).1.iter().fold(0.0f64, |acc, v| acc.max((v / 0.25 - 1.0).abs()))
    };
    let (coarse, fine) = (worst_dev(5), worst_dev(200));
    assert!(fine <= coarse, "200 steps: {fine}, 5 steps: {coarse}");
    assert!(fine < 0.1, "{fine}");
}

#[test]
fn ancestral_sampling_recovers_the_mean() {
    let sched = NoiseSchedule::default_linear();
    let (m, mu) = model(0.25);
    // Ancestral steps plug in the posterior mean of x0 and drop its spread, so
    // only the full grid matches the target variance.
    let cfg = SamplerConfig { num_steps: 1000, eta: 1.0, seed: 5, ..SamplerConfig::default() };
    let chains = 2000;
    let samples = sample_chains(&m, None, (4, 4), &cfg, &sched, chains).unwrap();
    let (mean, var) = pixel_stats(&samples);
    // Five standard errors per pixel.
    let bound = 5.0 * (0.25f64 / chains as f64).sqrt();
    for (p, (a, b)) in mean.iter().zip(mu.data()).enumerate() {
        assert!((a - b).abs() < bound, "pixel {p}: {a} vs {b}");
    }
    for v in var {
        assert!((v / 0.25 - 1.0).abs() < 0.15, "{v}");
    }
}
