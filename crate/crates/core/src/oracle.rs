//! Slow, direct transcriptions used to cross-check the library.
//!
//! Nothing here calls the FFT, conv or metric code it is checking: the
//! spectrum is an O(N⁴) DFT sum, convolutions are explicit index loops over
//! the raw weights, and SSIM recomputes every window from scratch.

use crate::error::Result;
use crate::grid::ImageGrid;
use crate::nn::Activation;
use crate::perceptual::{FeatureExtractor, PerceptualWeights, SoftSegmenter};

/// Direct DFT, `F(u,v) = Σ x(r,c)·exp(−2πi(ur/H + vc/W))`, as (re, im) pairs
/// in row-major order.
pub fn naive_dft2(x: &ImageGrid) -> Vec<(f64, f64)> {
    let (h, w) = x.shape();
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let phase = -2.0 * std::f64::consts::PI * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                    re += x.get(r, c) * phase.cos();
                    im += x.get(r, c) * phase.sin();
                }
            }
            out.push((re, im));
        }
    }
    out
}

/// `N(log(1 + eps_log + |shift(F)|))` with the DC bin moved to `(H/2, W/2)`.
fn normalized_log_spectrum(x: &ImageGrid, eps_log: f64, eps_std: f64) -> Vec<f64> {
    let (h, w) = x.shape();
    let f = naive_dft2(x);
    let mut m = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (re, im) = f[u * w + v];
            let (su, sv) = ((u + h / 2) % h, (v + w / 2) % w);
            m[su * w + sv] = (1.0 + eps_log + (re * re + im * im).sqrt()).ln();
        }
    }
    let n = m.len() as f64;
    let mean = m.iter().sum::<f64>() / n;
    let std = (m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    m.iter().map(|v| (v - mean) / (std + eps_std)).collect()
}

/// Pixel-mean squared difference of standardized log-magnitude spectra.
pub fn visual_loss_reference(hr: &ImageGrid, sr: &ImageGrid, eps_log: f64, eps_std: f64) -> f64 {
    let a = normalized_log_spectrum(hr, eps_log, eps_std);
    let b = normalized_log_spectrum(sr, eps_log, eps_std);
    a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64
}

fn activate(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Identity => v,
        Activation::Tanh => v.tanh(),
        Activation::Silu => v / (1.0 + (-v).exp()),
    }
}

/// Zero-padded strided correlation over explicit indices; `input` is
/// `[channel][row][col]`.
fn conv_reference(
    input: &[Vec<Vec<f64>>],
    weight: &[f64],
    bias: &[f64],
    out_channels: usize,
    k: usize,
    stride: usize,
) -> Vec<Vec<Vec<f64>>> {
    let in_channels = input.len();
    let (h, w) = (input[0].len(), input[0][0].len());
    let (oh, ow) = (h / stride, w / stride);
    let pad = (k / 2) as isize;
    let mut out = vec![vec![vec![0.0; ow]; oh]; out_channels];
    for o in 0..out_channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias[o];
                for i in 0..in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride) as isize + ky as isize - pad;
                            let ix = (x * stride) as isize + kx as isize - pad;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += weight[((o * in_channels + i) * k + ky) * k + kx] * input[i][iy as usize][ix as usize];
                            }
                        }
                    }
                }
                out[o][y][x] = acc;
            }
        }
    }
    out
}

fn features_reference(x: &ImageGrid, fe: &FeatureExtractor) -> Vec<f64> {
    let (h, w) = x.shape();
    let mut act = vec![(0..h).map(|r| (0..w).map(|c| x.get(r, c)).collect()).collect::<Vec<Vec<f64>>>()];
    for layer in &fe.layers()[..fe.tap()] {
        act = conv_reference(&act, &layer.weight, &layer.bias, layer.out_channels, layer.kernel, layer.stride);
        for plane in act.iter_mut() {
            for row in plane.iter_mut() {
                for v in row.iter_mut() {
                    *v = activate(fe.activation(), *v);
                }
            }
        }
    }
    act.into_iter().flatten().flatten().collect()
}

fn masks_reference(x: &ImageGrid, seg: &SoftSegmenter) -> Vec<f64> {
    let k = seg.classes();
    let mut out = vec![0.0; k * x.len()];
    for (p, &raw) in x.data().iter().enumerate() {
        let v = raw.clamp(0.0, 1.0);
        let e: Vec<f64> = seg
            .centers()
            .iter()
            .map(|c| (-(v - c) * (v - c) / seg.temperature()).exp())
            .collect();
        let z: f64 = e.iter().sum();
        for c in 0..k {
            out[c * x.len() + p] = e[c] / z;
        }
    }
    out
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64
}

/// Weighted feature MSE plus mask MSE.
pub fn perceptual_loss_reference(hr: &ImageGrid, sr: &ImageGrid, fe: &FeatureExtractor, seg: &SoftSegmenter, w: PerceptualWeights) -> f64 {
    let feat = mean_sq_diff(&features_reference(hr, fe), &features_reference(sr, fe));
    let mask = mean_sq_diff(&masks_reference(hr, seg), &masks_reference(sr, seg));
    w.feature * feat + w.segmentation * mask
}

/// Mean SSIM over all 8×8 windows at stride 1, each window's statistics
/// summed directly.
pub fn ssim_reference(a: &ImageGrid, b: &ImageGrid, peak: f64) -> f64 {
    const WIN: usize = 8;
    let (h, w) = a.shape();
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (WIN * WIN) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=h - WIN {
        for left in 0..=w - WIN {
            let (mut sa, mut sb) = (0.0, 0.0);
            for r in top..top + WIN {
                for c in left..left + WIN {
                    sa += a.get(r, c);
                    sb += b.get(r, c);
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for r in top..top + WIN {
                for c in left..left + WIN {
                    let (da, db) = (a.get(r, c) - ma, b.get(r, c) - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(&ImageGrid) -> Result<f64>, x: &ImageGrid, h: f64) -> Result<ImageGrid> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.clone().into_data();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&ImageGrid::new(x.height(), x.width(), probe.clone())?)?;
        probe[i] = orig - h;
        let down = f(&ImageGrid::new(x.height(), x.width(), probe.clone())?)?;
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    ImageGrid::new(x.height(), x.width(), grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both are
/// below `floor`.
pub fn relative_error(a: &ImageGrid, b: &ImageGrid, floor: f64) -> Result<f64> {
    let diff = a.l2_norm_sq(b)?.sqrt();
    let scale = a.norm_sq().sqrt().max(b.norm_sq().sqrt());
    Ok(if scale < floor { diff } else { diff / scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn dft_of_impulse_is_flat() {
        let mut x = ImageGrid::zeros(3, 4).into_data();
        x[0] = 2.0;
        let f = naive_dft2(&ImageGrid::new(3, 4, x).unwrap());
        assert!(f.iter().all(|&(re, im)| (re - 2.0).abs() < 1e-12 && im.abs() < 1e-12));
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let x = Rng::new(2).uniform_grid(9, 10);
        assert!((ssim_reference(&x, &x, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn central_difference_of_a_quadratic() {
        let x = Rng::new(3).normal_grid(2, 3);
        let g = central_difference(|y| Ok(y.norm_sq()), &x, 1e-3).unwrap();
        assert!(g.max_abs_diff(&x.scale(2.0).unwrap()).unwrap() < 1e-9);
    }
}
