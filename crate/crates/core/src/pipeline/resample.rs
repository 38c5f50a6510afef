use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Keys cubic convolution kernel with a = −0.5.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-coordinate source indices and weights along one axis.
fn taps(out_len: usize, in_len: usize, scale: usize) -> Vec<[(usize, f64); 4]> {
    (0..out_len)
        .map(|o| {
            // Pixel-centre alignment, matching average pooling by `scale`.
            let src = (o as f64 + 0.5) / scale as f64 - 0.5;
            let base = src.floor() as isize;
            let frac = src - base as f64;
            let mut out = [(0usize, 0.0); 4];
            for (k, slot) in out.iter_mut().enumerate() {
                let idx = (base + k as isize - 1).clamp(0, in_len as isize - 1) as usize;
                *slot = (idx, cubic(frac - (k as f64 - 1.0)));
            }
            out
        })
        .collect()
}

/// Bicubic upsampling by an integer factor with edge clamping.
pub fn upsample_bicubic(lr: &ImageGrid, scale: usize) -> Result<ImageGrid> {
    if scale == 0 {
        return Err(Error::Config("scale must be positive".into()));
    }
    let (h, w) = lr.shape();
    let (oh, ow) = (h * scale, w * scale);
    let rows = taps(oh, h, scale);
    let cols = taps(ow, w, scale);
    // Separable: horizontal pass then vertical pass.
    let mut horiz = vec![0.0; h * ow];
    for r in 0..h {
        for (c, tap) in cols.iter().enumerate() {
            horiz[r * ow + c] = tap.iter().map(|&(i, wt)| wt * lr.get(r, i)).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for (r, tap) in rows.iter().enumerate() {
        for c in 0..ow {
            out[r * ow + c] = tap.iter().map(|&(i, wt)| wt * horiz[i * ow + c]).sum();
        }
    }
    ImageGrid::new(oh, ow, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn constant_stays_constant() {
        let up = upsample_bicubic(&ImageGrid::filled(4, 3, 0.25), 4).unwrap();
        assert_eq!(up.shape(), (16, 12));
        assert!(up.data().iter().all(|v| (v - 0.25).abs() < 1e-14));
    }

    #[test]
    fn linear_ramp_is_reproduced_in_interior() {
        let lr = ImageGrid::from_fn(8, 8, |_, c| c as f64).unwrap();
        let up = upsample_bicubic(&lr, 2).unwrap();
        for c in 4..12 {
            let expect = (c as f64 + 0.5) / 2.0 - 0.5;
            assert!((up.get(5, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_one_is_identity() {
        let x = Rng::new(3).uniform_grid(5, 6);
        assert!(upsample_bicubic(&x, 1).unwrap().max_abs_diff(&x).unwrap() < 1e-15);
    }
}
