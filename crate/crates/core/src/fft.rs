//! 2D discrete Fourier transform.
//!
//! Convention: the forward transform is the plain double sum
//! `F(u,v) = Σ_x Σ_y I(x,y)·e^{−2πi(ux/H + vy/W)}` with no prefactor; the
//! inverse carries the full `1/(HW)`. Any positive size is supported
//! (rustfft picks mixed-radix or Bluestein plans as needed), so no padding
//! or cropping ever happens.

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::{ComplexSpectrum, ImageGrid};

/// Largest imaginary part tolerated when collapsing an inverse transform
/// to a real image.
pub const IMAG_TOLERANCE: f64 = 1e-9;

fn transform_2d(height: usize, width: usize, data: &mut [Complex64], direction: FftDirection) {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft(width, direction);
    for row in data.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft(height, direction);
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for c in 0..width {
        for r in 0..height {
            column[r] = data[r * width + c];
        }
        col_fft.process(&mut column);
        for r in 0..height {
            data[r * width + c] = column[r];
        }
    }
}

/// Unnormalized forward DFT of a real image.
pub fn fft2(img: &ImageGrid) -> ComplexSpectrum {
    let (h, w) = img.shape();
    let mut data: Vec<Complex64> = img.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_2d(h, w, &mut data, FftDirection::Forward);
    ComplexSpectrum::from_raw(h, w, data)
}

/// Inverse DFT with `1/(HW)` normalization, without the real-output check.
pub fn ifft2_complex(spec: &ComplexSpectrum) -> ComplexSpectrum {
    let (h, w) = spec.shape();
    let mut data = spec.data().to_vec();
    transform_2d(h, w, &mut data, FftDirection::Inverse);
    let norm = 1.0 / (h * w) as f64;
    for z in &mut data {
        *z *= norm;
    }
    ComplexSpectrum::from_raw(h, w, data)
}

/// Inverse DFT returning a real image. Fails when the imaginary residue
/// exceeds [`IMAG_TOLERANCE`], which means the spectrum was not the
/// transform of a real image.
pub fn ifft2(spec: &ComplexSpectrum) -> Result<ImageGrid> {
    let inv = ifft2_complex(spec);
    let worst = inv.data().iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
    if worst > IMAG_TOLERANCE {
        return Err(Error::NonRealInverse(worst));
    }
    let (h, w) = inv.shape();
    ImageGrid::new(h, w, inv.data().iter().map(|z| z.re).collect())
}

fn shift_by<T: Copy>(height: usize, width: usize, data: &[T], dy: usize, dx: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for u in 0..height {
        for v in 0..width {
            out[((u + dy) % height) * width + (v + dx) % width] = data[u * width + v];
        }
    }
    out
}

/// Moves entry (u, v) to ((u + ⌊H/2⌋) mod H, (v + ⌊W/2⌋) mod W), placing
/// the zero frequency at (⌊H/2⌋, ⌊W/2⌋).
pub fn fftshift(spec: &ComplexSpectrum) -> ComplexSpectrum {
    let (h, w) = spec.shape();
    ComplexSpectrum::from_raw(h, w, shift_by(h, w, spec.data(), h / 2, w / 2))
}

/// Exact inverse (and adjoint) of [`fftshift`]; differs from it for odd sizes.
pub fn ifftshift(spec: &ComplexSpectrum) -> ComplexSpectrum {
    let (h, w) = spec.shape();
    ComplexSpectrum::from_raw(h, w, shift_by(h, w, spec.data(), h - h / 2, w - w / 2))
}

/// [`fftshift`] applied to a real grid.
pub fn fftshift_real(img: &ImageGrid) -> ImageGrid {
    let (h, w) = img.shape();
    ImageGrid::from_raw(h, w, shift_by(h, w, img.data(), h / 2, w / 2))
}

/// [`ifftshift`] applied to a real grid.
pub fn ifftshift_real(img: &ImageGrid) -> ImageGrid {
    let (h, w) = img.shape();
    ImageGrid::from_raw(h, w, shift_by(h, w, img.data(), h - h / 2, w - w / 2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    /// Direct O(N²) evaluation of the double sum.
    fn naive_dft(img: &ImageGrid) -> Vec<Complex64> {
        let (h, w) = img.shape();
        let mut out = vec![c(0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = c(0.0);
                for x in 0..h {
                    for y in 0..w {
                        let phase = -std::f64::consts::TAU
                            * ((u * x) as f64 / h as f64 + (v * y) as f64 / w as f64);
                        acc += Complex64::from_polar(img.get(x, y), phase);
                    }
                }
                out[u * w + v] = acc;
            }
        }
        out
    }

    #[test]
    fn constant_image_has_only_dc() {
        let spec = fft2(&ImageGrid::filled(2, 2, 1.0));
        assert_eq!(spec.data(), &[c(4.0), c(0.0), c(0.0), c(0.0)]);
    }

    #[test]
    fn delta_transforms_to_constant() {
        let img = ImageGrid::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(fft2(&img).data().iter().all(|z| (*z - c(1.0)).norm() < 1e-15));
    }

    #[test]
    fn matches_naive_dft_for_awkward_sizes() {
        let mut rng = Rng::new(11);
        for &(h, w) in &[(6, 6), (12, 20), (20, 12), (5, 7), (8, 8)] {
            let img = rng.uniform_grid(h, w);
            let fast = fft2(&img);
            for (a, b) in fast.data().iter().zip(naive_dft(&img)) {
                assert!((a - b).norm() < 1e-10, "{h}x{w}");
            }
        }
    }

    #[test]
    fn round_trip() {
        let mut rng = Rng::new(5);
        for &(h, w) in &[(8, 8), (6, 12), (20, 6)] {
            let img = rng.normal_grid(h, w);
            let back = ifft2(&fft2(&img)).unwrap();
            assert!(back.max_abs_diff(&img).unwrap() < 1e-12);
        }
    }

    #[test]
    fn inverse_of_pure_dc_and_zero() {
        let mut data = vec![c(0.0); 12];
        data[0] = c(12.0);
        let spec = ComplexSpectrum::new(3, 4, data).unwrap();
        assert_eq!(ifft2(&spec).unwrap(), ImageGrid::filled(3, 4, 1.0));
        assert_eq!(ifft2(&ComplexSpectrum::zeros(3, 4)).unwrap(), ImageGrid::zeros(3, 4));
    }

    #[test]
    fn inverse_rejects_non_hermitian_spectrum() {
        let mut data = vec![c(0.0); 4];
        data[1] = Complex64::new(0.0, 1.0);
        let spec = ComplexSpectrum::new(2, 2, data).unwrap();
        assert!(matches!(ifft2(&spec), Err(Error::NonRealInverse(_))));
    }

    #[test]
    fn shift_positions() {
        let spec = fft2(&ImageGrid::filled(2, 2, 1.0));
        assert_eq!(fftshift(&spec).get(1, 1), c(4.0));
        assert_eq!(fftshift(&fftshift(&spec)), spec);

        let mut data = vec![c(0.0); 9];
        data[0] = c(1.0);
        let odd = ComplexSpectrum::new(3, 3, data).unwrap();
        assert_eq!(fftshift(&odd).get(1, 1), c(1.0));
        assert_eq!(ifftshift(&fftshift(&odd)), odd);
    }

    #[test]
    fn conjugate_symmetry_of_real_input() {
        let img = Rng::new(8).uniform_grid(6, 5);
        let spec = fft2(&img);
        for u in 0..6 {
            for v in 0..5 {
                let mirror = spec.get((6 - u) % 6, (5 - v) % 5).conj();
                assert!((spec.get(u, v) - mirror).norm() < 1e-12);
            }
        }
    }
}
