//! Synthetic thermal-style scenes: smooth warm blobs for the background
//! plus hard-edged hot rectangles and bars standing in for vehicles and
//! pedestrians.

use rayon::prelude::*;

use crate::grid::ImageGrid;
use crate::rng::Rng;

pub const MIN_SYNTH_SIZE: usize = 16;

fn scene(size: usize, rng: &mut Rng) -> ImageGrid {
    let s = size as f64;
    let mut img = vec![rng.uniform_range(0.05, 0.25); size * size];

    let blobs = 3 + rng.below(4);
    for _ in 0..blobs {
        let (cy, cx) = (rng.uniform_range(0.0, s), rng.uniform_range(0.0, s));
        let sigma = rng.uniform_range(s / 8.0, s / 3.0);
        let amp = rng.uniform_range(0.15, 0.5);
        for r in 0..size {
            for c in 0..size {
                let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                img[r * size + c] += amp * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            }
        }
    }

    let shapes = 2 + rng.below(4);
    for _ in 0..shapes {
        let pedestrian = rng.uniform() < 0.5;
        let (bh, bw) = if pedestrian {
            let w = rng.uniform_range(s / 32.0, s / 12.0).max(1.0);
            (w * rng.uniform_range(2.5, 4.0), w)
        } else {
            let w = rng.uniform_range(s / 8.0, s / 4.0);
            (w * rng.uniform_range(0.4, 0.7), w)
        };
        let (bh, bw) = (bh.round().max(1.0) as usize, bw.round().max(1.0) as usize);
        let top = rng.below(size.saturating_sub(bh).max(1));
        let left = rng.below(size.saturating_sub(bw).max(1));
        let heat = rng.uniform_range(0.4, 0.9);
        for r in top..(top + bh).min(size) {
            for c in left..(left + bw).min(size) {
                img[r * size + c] += heat;
            }
        }
        // A cooler window band across vehicles adds interior edges.
        if !pedestrian && bh >= 3 {
            let band = top + bh / 3;
            for c in left..(left + bw).min(size) {
                img[band.min(size - 1) * size + c] -= 0.5 * heat;
            }
        }
    }

    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    ImageGrid::from_raw(size, size, img.into_iter().map(|v| (v - lo) / span).collect())
}

/// `n` square images of side `size` (≥ 16), normalized to [0, 1]. Image `i`
/// depends only on the seed of `rng` and `i`.
pub fn synth_thermal_dataset(n: usize, size: usize, rng: &Rng) -> Vec<ImageGrid> {
    assert!(size >= MIN_SYNTH_SIZE, "synthetic images must be at least {MIN_SYNTH_SIZE} pixels");
    (0..n)
        .into_par_iter()
        .map(|i| scene(size, &mut rng.split(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_thermal_dataset(6, 32, &Rng::new(9));
        let b = synth_thermal_dataset(6, 32, &Rng::new(9));
        assert_eq!(a, b);
        for img in &a {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(img.std() > 0.01);
        }
        assert_ne!(a[0], a[1]);
    }
}
