use gdsr_core::fft::{fft2, ifft2};
use gdsr_core::guidance::{adjust_noise, GuidancePolicy};
use gdsr_core::pipeline::{psnr, ssim, DegradationModel, KernelSpec};
use gdsr_core::schedule::NoiseSchedule;
use gdsr_core::visual::{visual_loss, SpectralLossConfig};
use gdsr_core::{ImageGrid, Rng};
use proptest::prelude::*;

fn grid(seed: u64, h: usize, w: usize) -> ImageGrid {
    Rng::new(seed).normal_grid(h, w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parseval_holds(seed in any::<u64>(), h in 1usize..13, w in 1usize..13) {
        let x = grid(seed, h, w);
        let energy: f64 = fft2(&x).data().iter().map(|z| z.norm_sqr()).sum::<f64>() / (h * w) as f64;
        prop_assert!((energy - x.norm_sq()).abs() <= 1e-9 * x.norm_sq().max(1e-300));
    }

    #[test]
    fn fft_round_trip(seed in any::<u64>(), h in 1usize..13, w in 1usize..13) {
        let x = grid(seed, h, w);
        prop_assert!(ifft2(&fft2(&x)).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn visual_loss_ignores_circular_shifts(seed in any::<u64>(), dy in -8isize..8, dx in -8isize..8) {
        let x = Rng::new(seed).uniform_grid(12, 10);
        let loss = visual_loss(&x, &x.roll(dy, dx), &SpectralLossConfig::default()).unwrap();
        prop_assert!(loss < 1e-12);
    }

    #[test]
    fn degradation_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0, scale in 1usize..4) {
        let d = DegradationModel::new(scale, KernelSpec::Box { size: 3 }, 0.0).unwrap();
        let (x, y) = (grid(seed, 12, 12), grid(seed ^ 1, 12, 12));
        let lhs = d.apply_linear(&x.scale(a).unwrap().add_scaled(&y, b).unwrap()).unwrap();
        let rhs = d.apply_linear(&x).unwrap().scale(a).unwrap().add_scaled(&d.apply_linear(&y).unwrap(), b).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn adjust_noise_is_linear_in_rho(seed in any::<u64>(), r1 in 0.0f64..5.0, r2 in 0.0f64..5.0, t in 1usize..1000) {
        let sched = NoiseSchedule::default_linear();
        let policy = GuidancePolicy { clip_rms: None, ..GuidancePolicy::default() };
        let (eps, g) = (grid(seed, 6, 6), grid(seed ^ 7, 6, 6));
        let both = adjust_noise(&eps, &[(r1 + r2, g.clone())], t, &sched, &policy).unwrap();
        let split = adjust_noise(&eps, &[(r1, g.clone()), (r2, g)], t, &sched, &policy).unwrap();
        prop_assert!(both.max_abs_diff(&split).unwrap() < 1e-12);
    }

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (a, b) = (rng.uniform_grid(16, 16), rng.uniform_grid(16, 16));
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
        prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
    }
}
