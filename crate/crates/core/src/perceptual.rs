//! Perceptual prior: feature-space MSE through a locked convolutional
//! extractor plus mask-space MSE through a differentiable soft segmenter.
//!
//! The extractor is a small seeded conv stack and the segmenter is an
//! intensity softmax over fixed class centres. Both are frozen after
//! construction and fully differentiable, so the loss has an exact
//! reverse-mode gradient.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::guidance::ReferenceLoss;
use crate::nn::{Activation, Conv2d, FeatureMap};
use crate::rng::Rng;

pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5EED_F00D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    layers: Vec<Conv2d>,
    activation: Activation,
    /// Number of layers applied before tapping; 0 taps the raw input.
    tap: usize,
}

impl Default for FeatureExtractor {
    /// Channels 1→8→16→16, 3×3, stride 1, tanh, tapped after the last layer.
    fn default() -> Self {
        Self::seeded(&[1, 8, 16, 16], 3, Activation::Tanh, DEFAULT_EXTRACTOR_SEED).expect("default extractor is valid")
    }
}

impl FeatureExtractor {
    /// Bias-free stack with fan-in uniform weights drawn from `seed`.
    pub fn seeded(channels: &[usize], kernel: usize, activation: Activation, seed: u64) -> Result<Self> {
        if channels.first() != Some(&1) {
            return Err(Error::Config("extractor input must have one channel".into()));
        }
        let mut rng = Rng::new(seed);
        let layers = channels
            .windows(2)
            .map(|w| Conv2d::init(w[0], w[1], kernel, 1, false, &mut rng))
            .collect::<Vec<_>>();
        let tap = layers.len();
        Self::from_layers(layers, activation, tap)
    }

    /// Zero layers; features are the input itself.
    pub fn identity() -> Self {
        Self {
            layers: Vec::new(),
            activation: Activation::Identity,
            tap: 0,
        }
    }

    /// Wraps externally supplied weights.
    pub fn from_layers(layers: Vec<Conv2d>, activation: Activation, tap: usize) -> Result<Self> {
        let fe = Self { layers, activation, tap };
        fe.validate()?;
        Ok(fe)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tap > self.layers.len() {
            return Err(Error::Config(format!("tap {} beyond {} layers", self.tap, self.layers.len())));
        }
        let mut channels = 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if layer.in_channels != channels {
                return Err(Error::Config(format!("extractor layer {i} expects {} channels, previous layer gives {channels}", layer.in_channels)));
            }
            channels = layer.out_channels;
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Conv2d] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn tap(&self) -> usize {
        self.tap
    }

    fn forward_tape(&self, x: &ImageGrid) -> Result<(Vec<FeatureMap>, Vec<FeatureMap>)> {
        let mut inputs = vec![FeatureMap::from_grid(x)];
        let mut pre = Vec::with_capacity(self.tap);
        for layer in &self.layers[..self.tap] {
            let z = layer.forward(inputs.last().expect("non-empty"))?;
            let mut h = z.clone();
            h.data.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            pre.push(z);
            inputs.push(h);
        }
        Ok((inputs, pre))
    }

    /// Pulls a cotangent on the tap activation back to the input image.
    fn backward(&self, inputs: &[FeatureMap], pre: &[FeatureMap], grad_tap: FeatureMap) -> ImageGrid {
        let mut grad = grad_tap;
        for l in (0..self.tap).rev() {
            for (g, z) in grad.data.iter_mut().zip(&pre[l].data) {
                *g *= self.activation.derivative(*z);
            }
            grad = self.layers[l].backward_input(&grad, inputs[l].height, inputs[l].width);
        }
        grad.channel_grid(0)
    }
}

pub fn extract_features(x: &ImageGrid, fe: &FeatureExtractor) -> Result<FeatureMap> {
    let (mut inputs, _) = fe.forward_tape(x)?;
    Ok(inputs.pop().expect("non-empty"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftSegmenter {
    centers: Vec<f64>,
    temperature: f64,
}

impl Default for SoftSegmenter {
    /// Four evenly spread classes, temperature 0.05.
    fn default() -> Self {
        Self::evenly_spaced(4, 0.05).expect("default segmenter is valid")
    }
}

impl SoftSegmenter {
    pub fn new(centers: Vec<f64>, temperature: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::Config("segmenter needs at least one class".into()));
        }
        if centers.windows(2).any(|w| w[1] <= w[0]) || centers.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("class centres must be strictly increasing within [0, 1]".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        Ok(Self { centers, temperature })
    }

    /// Centres at `(i + 0.5)/k`.
    pub fn evenly_spaced(k: usize, temperature: f64) -> Result<Self> {
        Self::new((0..k).map(|i| (i as f64 + 0.5) / k as f64).collect(), temperature)
    }

    pub fn classes(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    fn probabilities(&self, v: f64, out: &mut [f64]) {
        let logits = self.centers.iter().map(|c| -(v - c) * (v - c) / self.temperature);
        let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, z) in out.iter_mut().zip(logits) {
            *o = (z - max).exp();
            total += *o;
        }
        out.iter_mut().for_each(|o| *o /= total);
    }
}

/// Soft class masks, one channel per class, summing to 1 at every pixel.
/// Inputs are clamped to [0, 1] first; outside that range the masks (and
/// hence their gradient) are constant.
pub fn soft_segment(x: &ImageGrid, seg: &SoftSegmenter) -> FeatureMap {
    let k = seg.classes();
    let n = x.len();
    let mut out = FeatureMap::zeros(k, x.height(), x.width());
    let mut probs = vec![0.0; k];
    for (p, &v) in x.data().iter().enumerate() {
        seg.probabilities(v.clamp(0.0, 1.0), &mut probs);
        for c in 0..k {
            out.data[c * n + p] = probs[c];
        }
    }
    out
}

fn soft_segment_backward(x: &ImageGrid, seg: &SoftSegmenter, grad_masks: &FeatureMap) -> ImageGrid {
    let k = seg.classes();
    let n = x.len();
    let mut probs = vec![0.0; k];
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(p, &v)| {
            if !(0.0..=1.0).contains(&v) {
                return 0.0;
            }
            seg.probabilities(v, &mut probs);
            let mean_g: f64 = (0..k).map(|c| probs[c] * grad_masks.data[c * n + p]).sum();
            (0..k)
                .map(|c| probs[c] * (grad_masks.data[c * n + p] - mean_g) * (-2.0 * (v - seg.centers[c]) / seg.temperature))
                .sum()
        })
        .collect();
    ImageGrid::from_raw(x.height(), x.width(), data)
}

fn map_mse(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64
}

/// Per-term weights; both default to 1 (plain sum).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptualWeights {
    pub feature: f64,
    pub segmentation: f64,
}

impl Default for PerceptualWeights {
    fn default() -> Self {
        Self {
            feature: 1.0,
            segmentation: 1.0,
        }
    }
}

/// Feature-map MSE and mask MSE, reported separately.
pub fn perceptual_loss_terms(hr: &ImageGrid, sr: &ImageGrid, fe: &FeatureExtractor, seg: &SoftSegmenter) -> Result<(f64, f64)> {
    hr.ensure_same_shape(sr)?;
    let feat = map_mse(&extract_features(hr, fe)?, &extract_features(sr, fe)?);
    let mask = map_mse(&soft_segment(hr, seg), &soft_segment(sr, seg));
    Ok((feat, mask))
}

pub fn perceptual_loss(hr: &ImageGrid, sr: &ImageGrid, fe: &FeatureExtractor, seg: &SoftSegmenter) -> Result<f64> {
    weighted_perceptual_loss(hr, sr, fe, seg, PerceptualWeights::default())
}

pub fn weighted_perceptual_loss(hr: &ImageGrid, sr: &ImageGrid, fe: &FeatureExtractor, seg: &SoftSegmenter, w: PerceptualWeights) -> Result<f64> {
    let (feat, mask) = perceptual_loss_terms(hr, sr, fe, seg)?;
    Ok(w.feature * feat + w.segmentation * mask)
}

pub fn perceptual_loss_grad(hr: &ImageGrid, sr: &ImageGrid, fe: &FeatureExtractor, seg: &SoftSegmenter) -> Result<ImageGrid> {
    weighted_perceptual_loss_grad(hr, sr, fe, seg, PerceptualWeights::default())
}

pub fn weighted_perceptual_loss_grad(hr: &ImageGrid, sr: &ImageGrid, fe: &FeatureExtractor, seg: &SoftSegmenter, w: PerceptualWeights) -> Result<ImageGrid> {
    hr.ensure_same_shape(sr)?;
    let target_feat = extract_features(hr, fe)?;
    let (inputs, pre) = fe.forward_tape(sr)?;
    let feat = inputs.last().expect("non-empty");
    let scale = 2.0 * w.feature / feat.data.len() as f64;
    let grad_tap = FeatureMap {
        data: feat.data.iter().zip(&target_feat.data).map(|(a, b)| scale * (a - b)).collect(),
        ..feat.clone()
    };
    let grad_feat = fe.backward(&inputs, &pre, grad_tap);

    let target_masks = soft_segment(hr, seg);
    let masks = soft_segment(sr, seg);
    let scale = 2.0 * w.segmentation / masks.data.len() as f64;
    let grad_masks = FeatureMap {
        data: masks.data.iter().zip(&target_masks.data).map(|(a, b)| scale * (a - b)).collect(),
        ..masks.clone()
    };
    let grad_seg = soft_segment_backward(sr, seg, &grad_masks);
    grad_feat.add(&grad_seg)
}

/// The perceptual prior as a guidance loss against a reference image.
#[derive(Debug, Clone)]
pub struct PerceptualPrior {
    pub extractor: Arc<FeatureExtractor>,
    pub segmenter: SoftSegmenter,
    pub weights: PerceptualWeights,
}

impl Default for PerceptualPrior {
    fn default() -> Self {
        Self {
            extractor: Arc::new(FeatureExtractor::default()),
            segmenter: SoftSegmenter::default(),
            weights: PerceptualWeights::default(),
        }
    }
}

impl ReferenceLoss for PerceptualPrior {
    fn name(&self) -> &str {
        "perceptual"
    }

    fn loss(&self, reference: &ImageGrid, candidate: &ImageGrid) -> Result<f64> {
        weighted_perceptual_loss(reference, candidate, &self.extractor, &self.segmenter, self.weights)
    }

    fn gradient(&self, reference: &ImageGrid, candidate: &ImageGrid) -> Result<ImageGrid> {
        weighted_perceptual_loss_grad(reference, candidate, &self.extractor, &self.segmenter, self.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extractor_determinism_and_zero_input() {
        let fe = FeatureExtractor::default();
        let x = Rng::new(1).uniform_grid(8, 8);
        assert_eq!(extract_features(&x, &fe).unwrap(), extract_features(&x, &fe).unwrap());
        assert_eq!(fe, FeatureExtractor::default());
        let zero = extract_features(&ImageGrid::zeros(8, 8), &fe).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        assert_eq!(zero.channels, 16);
    }

    #[test]
    fn masks_sum_to_one_and_saturate() {
        let seg = SoftSegmenter::default();
        let x = Rng::new(2).normal_grid(6, 6);
        let m = soft_segment(&x, &seg);
        for p in 0..36 {
            let s: f64 = (0..seg.classes()).map(|c| m.data[c * 36 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let sharp = SoftSegmenter::new(vec![0.2, 0.8], 0.01).unwrap();
        let at_center = soft_segment(&ImageGrid::filled(4, 4, 0.2), &sharp);
        assert!(at_center.channel(0).iter().all(|&v| v > 0.99));
    }

    #[test]
    fn segmenter_validation() {
        assert!(SoftSegmenter::new(vec![0.5, 0.5], 0.1).is_err());
        assert!(SoftSegmenter::new(vec![0.2, 1.5], 0.1).is_err());
        assert!(SoftSegmenter::new(vec![0.2, 0.6], 0.0).is_err());
    }

    #[test]
    fn identity_extractor_single_class_reduces_to_pixel_mse() {
        let mut rng = Rng::new(3);
        let hr = rng.uniform_grid(5, 5);
        let sr = rng.uniform_grid(5, 5);
        let fe = FeatureExtractor::identity();
        let seg = SoftSegmenter::new(vec![0.5], 0.05).unwrap();
        let loss = perceptual_loss(&hr, &sr, &fe, &seg).unwrap();
        assert!((loss - hr.mse(&sr).unwrap()).abs() < 1e-15);
        let grad = perceptual_loss_grad(&hr, &sr, &fe, &seg).unwrap();
        let expect = sr.sub(&hr).unwrap().scale(2.0 / 25.0).unwrap();
        assert!(grad.max_abs_diff(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let fe = FeatureExtractor::default();
        let seg = SoftSegmenter::default();
        let hr = rng.uniform_grid(8, 8);
        let sr = rng.uniform_grid(8, 8);
        let grad = perceptual_loss_grad(&hr, &sr, &fe, &seg).unwrap();
        let step = 1e-5;
        for i in 0..64 {
            let mut p = sr.data().to_vec();
            p[i] += step;
            let mut m = sr.data().to_vec();
            m[i] -= step;
            let fd = (perceptual_loss(&hr, &ImageGrid::new(8, 8, p).unwrap(), &fe, &seg).unwrap()
                - perceptual_loss(&hr, &ImageGrid::new(8, 8, m).unwrap(), &fe, &seg).unwrap())
                / (2.0 * step);
            assert!((fd - grad.data()[i]).abs() < 1e-4 * grad.max_abs(), "pixel {i}");
        }
        assert_eq!(perceptual_loss_grad(&hr, &hr, &fe, &seg).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn masks_commute_with_pixel_permutation() {
        let x = Rng::new(5).uniform_grid(6, 6);
        let seg = SoftSegmenter::default();
        let rolled = soft_segment(&x.roll(2, 3), &seg);
        let m = soft_segment(&x, &seg);
        for c in 0..seg.classes() {
            assert_eq!(rolled.channel_grid(c), m.channel_grid(c).roll(2, 3));
        }
    }
}
