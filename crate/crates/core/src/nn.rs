//! Minimal multi-channel convolution primitives with hand-written
//! reverse-mode gradients, shared by the trainable denoiser and the fixed
//! feature extractor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::rng::Rng;

/// C×H×W activations, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_grid(grid: &ImageGrid) -> Self {
        Self {
            channels: 1,
            height: grid.height(),
            width: grid.width(),
            data: grid.data().to_vec(),
        }
    }

    /// Stacks single-channel grids of equal shape.
    pub fn stack(grids: &[&ImageGrid]) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::IncompatibleShape("cannot stack zero grids".into()))?;
        let mut data = Vec::with_capacity(grids.len() * first.len());
        for g in grids {
            g.ensure_same_shape(first)?;
            data.extend_from_slice(g.data());
        }
        Ok(Self {
            channels: grids.len(),
            height: first.height(),
            width: first.width(),
            data,
        })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn channel_grid(&self, c: usize) -> ImageGrid {
        ImageGrid::from_raw(self.height, self.width, self.channel(c).to_vec())
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Silu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    /// Derivative evaluated at the pre-activation value.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

/// Output columns `ox` whose tap `ox·s + dx` lands inside `0..iw`.
fn column_range(dx: isize, s: isize, iw: isize, ow: usize) -> (usize, usize) {
    let lo = if dx < 0 { (-dx + s - 1) / s } else { 0 };
    let last = iw - 1 - dx;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(ow as isize) };
    (lo as usize, (hi.max(lo)) as usize)
}

/// Square-kernel convolution with zero "same" padding (`kernel / 2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Layout `[out][in][ky][kx]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients of a [`Conv2d`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    /// Uniform fan-in initialization, `U(−1/√fan_in, 1/√fan_in)`, drawn in a
    /// fixed order from `rng`.
    pub fn init(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, with_bias: bool, rng: &mut Rng) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        let bias = (0..out_channels)
            .map(|_| if with_bias { rng.uniform_range(-bound, bound) } else { 0.0 })
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight,
            bias,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let expect = self.out_channels * self.in_channels * self.kernel * self.kernel;
        if self.kernel == 0 || self.kernel % 2 == 0 || self.stride == 0 {
            return Err(Error::IncompatibleShape(format!(
                "conv kernel must be odd and stride positive, got kernel {} stride {}",
                self.kernel, self.stride
            )));
        }
        if self.weight.len() != expect || self.bias.len() != self.out_channels {
            return Err(Error::IncompatibleShape("conv parameter count mismatch".into()));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::IncompatibleShape("non-finite conv parameter".into()));
        }
        Ok(())
    }

    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height % self.stride != 0 || width % self.stride != 0 {
            return Err(Error::IncompatibleShape(format!(
                "{height}x{width} not divisible by stride {}",
                self.stride
            )));
        }
        Ok((height / self.stride, width / self.stride))
    }

    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx]
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        if input.channels != self.in_channels {
            return Err(Error::IncompatibleShape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        let (oh, ow) = self.output_dims(input.height, input.width)?;
        let (ih, iw) = (input.height as isize, input.width as isize);
        let pad = (self.kernel / 2) as isize;
        let s = self.stride as isize;
        let mut out = FeatureMap::zeros(self.out_channels, oh, ow);
        for o in 0..self.out_channels {
            let plane = out.channel_mut(o);
            plane.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let src = input.channel(i);
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let w = self.w(o, i, ky, kx);
                        let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                        let (lo, hi) = column_range(dx, s, iw, ow);
                        for oy in 0..oh as isize {
                            let iy = oy * s + dy;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            let row = &src[(iy * iw) as usize..((iy + 1) * iw) as usize];
                            let dst = &mut plane[(oy as usize) * ow..(oy as usize + 1) * ow];
                            if s == 1 {
                                let shifted = &row[(lo as isize + dx) as usize..(hi as isize + dx) as usize];
                                for (d, v) in dst[lo..hi].iter_mut().zip(shifted) {
                                    *d += w * v;
                                }
                            } else {
                                for ox in lo..hi {
                                    dst[ox] += w * row[(ox as isize * s + dx) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian product with respect to the input.
    pub fn backward_input(&self, grad_out: &FeatureMap, in_height: usize, in_width: usize) -> FeatureMap {
        let (ih, iw) = (in_height as isize, in_width as isize);
        let (oh, ow) = (grad_out.height, grad_out.width);
        let pad = (self.kernel / 2) as isize;
        let s = self.stride as isize;
        let mut grad_in = FeatureMap::zeros(self.in_channels, in_height, in_width);
        for o in 0..self.out_channels {
            let g = grad_out.channel(o);
            for i in 0..self.in_channels {
                let dst = grad_in.channel_mut(i);
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let w = self.w(o, i, ky, kx);
                        let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                        let (lo, hi) = column_range(dx, s, iw, ow);
                        for oy in 0..oh as isize {
                            let iy = oy * s + dy;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            let grow = &g[(oy as usize) * ow..(oy as usize + 1) * ow];
                            let drow = &mut dst[(iy * iw) as usize..((iy + 1) * iw) as usize];
                            if s == 1 {
                                let shifted = &mut drow[(lo as isize + dx) as usize..(hi as isize + dx) as usize];
                                for (d, gv) in shifted.iter_mut().zip(&grow[lo..hi]) {
                                    *d += w * gv;
                                }
                            } else {
                                for ox in lo..hi {
                                    drow[(ox as isize * s + dx) as usize] += w * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }

    /// Gradients of `⟨grad_out, conv(input)⟩` with respect to weights and bias.
    pub fn backward_params(&self, input: &FeatureMap, grad_out: &FeatureMap) -> ConvGrads {
        let (ih, iw) = (input.height as isize, input.width as isize);
        let (oh, ow) = (grad_out.height, grad_out.width);
        let pad = (self.kernel / 2) as isize;
        let s = self.stride as isize;
        let mut weight = vec![0.0; self.weight.len()];
        let mut bias = vec![0.0; self.out_channels];
        for o in 0..self.out_channels {
            let g = grad_out.channel(o);
            bias[o] = g.iter().sum();
            for i in 0..self.in_channels {
                let src = input.channel(i);
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                        let (lo, hi) = column_range(dx, s, iw, ow);
                        let mut acc = 0.0;
                        for oy in 0..oh as isize {
                            let iy = oy * s + dy;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            let grow = &g[(oy as usize) * ow..(oy as usize + 1) * ow];
                            let srow = &src[(iy * iw) as usize..((iy + 1) * iw) as usize];
                            if s == 1 {
                                let shifted = &srow[(lo as isize + dx) as usize..(hi as isize + dx) as usize];
                                acc += grow[lo..hi].iter().zip(shifted).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                for ox in lo..hi {
                                    acc += grow[ox] * srow[(ox as isize * s + dx) as usize];
                                }
                            }
                        }
                        weight[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx] = acc;
                    }
                }
            }
        }
        ConvGrads { weight, bias }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(rng: &mut Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap {
            channels: c,
            height: h,
            width: w,
            data: (0..c * h * w).map(|_| rng.normal()).collect(),
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn backward_input_is_adjoint_of_forward() {
        let mut rng = Rng::new(2);
        for stride in [1, 2] {
            let mut conv = Conv2d::init(3, 4, 3, stride, false, &mut rng);
            conv.bias.fill(0.0);
            let x = random_map(&mut rng, 3, 8, 8);
            let y = conv.forward(&x).unwrap();
            let g = random_map(&mut rng, 4, y.height, y.width);
            let back = conv.backward_input(&g, 8, 8);
            let lhs = dot(&y.data, &g.data);
            let rhs = dot(&x.data, &back.data);
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let mut rng = Rng::new(9);
        let conv = Conv2d::init(2, 3, 3, 1, true, &mut rng);
        let x = random_map(&mut rng, 2, 6, 6);
        let g = random_map(&mut rng, 3, 6, 6);
        let grads = conv.backward_params(&x, &g);
        let objective = |c: &Conv2d| dot(&c.forward(&x).unwrap().data, &g.data);
        let h = 1e-6;
        for idx in [0, 7, 20, conv.weight.len() - 1] {
            let mut p = conv.clone();
            p.weight[idx] += h;
            let mut m = conv.clone();
            m.weight[idx] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            assert!((fd - grads.weight[idx]).abs() < 1e-6, "weight {idx}");
        }
        let mut p = conv.clone();
        p.bias[1] += h;
        let mut m = conv.clone();
        m.bias[1] -= h;
        let fd = (objective(&p) - objective(&m)) / (2.0 * h);
        assert!((fd - grads.bias[1]).abs() < 1e-6);
    }

    #[test]
    fn activation_derivatives() {
        for act in [Activation::Identity, Activation::Tanh, Activation::Silu] {
            for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rejects_stride_mismatch() {
        let conv = Conv2d::init(1, 1, 3, 2, false, &mut Rng::new(0));
        let x = FeatureMap::zeros(1, 5, 4);
        assert!(matches!(conv.forward(&x), Err(Error::IncompatibleShape(_))));
    }
}
