//! Small trainable convolutional noise predictor.
//!
//! Layout: `depth − 1` hidden 3×3 conv layers with a per-channel timestep
//! bias and a smooth activation, then a linear output conv to one channel.
//! The input is `x_t`, optionally stacked with the upsampled low-resolution
//! condition as a second channel. When `skip_variance` is set the network
//! output is added to the closed-form Gaussian noise prediction centred on
//! the condition, so the layers only learn a residual correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::nn::{Activation, Conv2d, ConvGrads, FeatureMap};
use crate::rng::Rng;

pub const MAX_DEPTH: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvArch {
    pub hidden_channels: usize,
    /// Number of conv layers, output layer included.
    pub depth: usize,
    pub kernel: usize,
    pub embed_dim: usize,
    pub conditioned: bool,
    pub activation: Activation,
    pub skip_variance: Option<f64>,
}

impl Default for ConvArch {
    fn default() -> Self {
        Self {
            hidden_channels: 16,
            depth: 4,
            kernel: 3,
            embed_dim: 16,
            conditioned: true,
            activation: Activation::Silu,
            skip_variance: Some(0.01),
        }
    }
}

impl ConvArch {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.depth > MAX_DEPTH {
            return Err(Error::Config(format!("depth must be in 2..={MAX_DEPTH}, got {}", self.depth)));
        }
        if self.hidden_channels == 0 || self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::Config("hidden_channels > 0 and even embed_dim > 0 required".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("kernel size must be odd".into()));
        }
        if let Some(v) = self.skip_variance {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("skip_variance must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn in_channels(&self) -> usize {
        if self.conditioned {
            2
        } else {
            1
        }
    }

    fn hidden_layers(&self) -> usize {
        self.depth - 1
    }
}

/// Dense map from the sinusoidal timestep features to one bias per hidden
/// channel of every hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeProjection {
    pub inputs: usize,
    pub outputs: usize,
    /// Layout `[output][input]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvDenoiserParams {
    pub arch: ConvArch,
    pub layers: Vec<Conv2d>,
    pub time: TimeProjection,
}

/// Parameter gradients, mirroring [`ConvDenoiserParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParamGrads {
    pub layers: Vec<ConvGrads>,
    pub time_weight: Vec<f64>,
    pub time_bias: Vec<f64>,
}

/// Forward activations kept for the backward pass.
struct Tape {
    input: FeatureMap,
    /// Pre-activations of each hidden layer.
    pre: Vec<FeatureMap>,
    /// Post-activations of each hidden layer.
    post: Vec<FeatureMap>,
    embedding: Vec<f64>,
    skip_scale: f64,
}

pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out.push((t as f64 * freq).sin());
    }
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out.push((t as f64 * freq).cos());
    }
    out
}

impl ConvDenoiserParams {
    /// Deterministic initialization from `seed`. The output layer starts at
    /// zero when the analytic skip path is enabled so an untrained model
    /// already reproduces the Gaussian baseline.
    pub fn init(arch: ConvArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = Rng::new(seed);
        let mut layers = Vec::with_capacity(arch.depth);
        let mut in_c = arch.in_channels();
        for _ in 0..arch.hidden_layers() {
            layers.push(Conv2d::init(in_c, arch.hidden_channels, arch.kernel, 1, true, &mut rng));
            in_c = arch.hidden_channels;
        }
        let mut out = Conv2d::init(in_c, 1, arch.kernel, 1, true, &mut rng);
        if arch.skip_variance.is_some() {
            out.weight.fill(0.0);
            out.bias.fill(0.0);
        }
        layers.push(out);
        let outputs = arch.hidden_channels * arch.hidden_layers();
        let bound = 1.0 / (arch.embed_dim as f64).sqrt();
        let time = TimeProjection {
            inputs: arch.embed_dim,
            outputs,
            weight: (0..outputs * arch.embed_dim).map(|_| rng.uniform_range(-bound, bound)).collect(),
            bias: vec![0.0; outputs],
        };
        Ok(Self { arch, layers, time })
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.layers.len() != self.arch.depth {
            return Err(Error::Checkpoint(format!(
                "expected {} layers, found {}",
                self.arch.depth,
                self.layers.len()
            )));
        }
        let mut in_c = self.arch.in_channels();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            let out_c = if i + 1 == self.layers.len() { 1 } else { self.arch.hidden_channels };
            if layer.in_channels != in_c || layer.out_channels != out_c || layer.stride != 1 {
                return Err(Error::Checkpoint(format!("layer {i} has inconsistent shape")));
            }
            in_c = out_c;
        }
        let t = &self.time;
        if t.inputs != self.arch.embed_dim
            || t.outputs != self.arch.hidden_channels * self.arch.hidden_layers()
            || t.weight.len() != t.inputs * t.outputs
            || t.bias.len() != t.outputs
            || t.weight.iter().chain(&t.bias).any(|v| !v.is_finite())
        {
            return Err(Error::Checkpoint("time projection has inconsistent shape".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Conv2d::num_params).sum::<usize>() + self.time.weight.len() + self.time.bias.len()
    }

    fn time_bias(&self, embedding: &[f64]) -> Vec<f64> {
        let p = &self.time;
        (0..p.outputs)
            .map(|o| p.bias[o] + p.weight[o * p.inputs..(o + 1) * p.inputs].iter().zip(embedding).map(|(w, e)| w * e).sum::<f64>())
            .collect()
    }

    fn skip_scale(&self, alpha_bar: f64) -> f64 {
        match self.arch.skip_variance {
            Some(s2) => (1.0 - alpha_bar).sqrt() / (alpha_bar * s2 + 1.0 - alpha_bar),
            None => 0.0,
        }
    }

    fn run(&self, x_t: &ImageGrid, t: usize, alpha_bar: f64, cond: Option<&ImageGrid>) -> Result<(ImageGrid, Tape)> {
        let input = match (self.arch.conditioned, cond) {
            (true, Some(c)) => FeatureMap::stack(&[x_t, c])?,
            (true, None) => return Err(Error::MissingCondition),
            (false, _) => FeatureMap::from_grid(x_t),
        };
        let embedding = timestep_embedding(t, self.arch.embed_dim);
        let tbias = self.time_bias(&embedding);
        let act = self.arch.activation;
        let hidden = self.arch.hidden_channels;
        let mut pre = Vec::with_capacity(self.arch.hidden_layers());
        let mut post = Vec::with_capacity(self.arch.hidden_layers());
        for (l, layer) in self.layers[..self.arch.hidden_layers()].iter().enumerate() {
            let src = post.last().unwrap_or(&input);
            let mut z = layer.forward(src)?;
            for c in 0..hidden {
                let b = tbias[l * hidden + c];
                z.channel_mut(c).iter_mut().for_each(|v| *v += b);
            }
            let mut h = z.clone();
            h.data.iter_mut().for_each(|v| *v = act.apply(*v));
            pre.push(z);
            post.push(h);
        }
        let out = self.layers.last().expect("depth >= 2").forward(post.last().expect("depth >= 2"))?;
        let skip_scale = self.skip_scale(alpha_bar);
        let shift = alpha_bar.sqrt();
        let mut eps = out.data;
        if self.arch.skip_variance.is_some() {
            for (i, e) in eps.iter_mut().enumerate() {
                let mean = cond.map_or(0.0, |c| c.data()[i]);
                *e += skip_scale * (x_t.data()[i] - shift * mean);
            }
        }
        let eps = ImageGrid::new(x_t.height(), x_t.width(), eps)?;
        Ok((
            eps,
            Tape {
                input,
                pre,
                post,
                embedding,
                skip_scale,
            },
        ))
    }

    pub fn predict_eps(&self, x_t: &ImageGrid, t: usize, alpha_bar: f64, cond: Option<&ImageGrid>) -> Result<ImageGrid> {
        Ok(self.run(x_t, t, alpha_bar, cond)?.0)
    }

    /// Back-propagates `grad_eps` to the first hidden activations' inputs.
    /// Returns per-layer cotangents of the pre-activations (hidden layers)
    /// and the cotangent of the network input.
    fn backward_core(&self, tape: &Tape, grad_eps: &ImageGrid) -> (Vec<FeatureMap>, FeatureMap) {
        let act = self.arch.activation;
        let (h, w) = grad_eps.shape();
        let mut grad = FeatureMap::from_grid(grad_eps);
        let n_hidden = self.arch.hidden_layers();
        let mut grad_pre = vec![FeatureMap::zeros(0, 0, 0); n_hidden];
        let out_layer = &self.layers[n_hidden];
        grad = out_layer.backward_input(&grad, h, w);
        for l in (0..n_hidden).rev() {
            let mut gz = grad;
            for (g, z) in gz.data.iter_mut().zip(&tape.pre[l].data) {
                *g *= act.derivative(*z);
            }
            grad = self.layers[l].backward_input(&gz, h, w);
            grad_pre[l] = gz;
        }
        (grad_pre, grad)
    }

    /// `(∂ε/∂x_t)ᵀ · cotangent`.
    pub fn vjp_input(&self, x_t: &ImageGrid, t: usize, alpha_bar: f64, cond: Option<&ImageGrid>, cotangent: &ImageGrid) -> Result<ImageGrid> {
        x_t.ensure_same_shape(cotangent)?;
        let (_, tape) = self.run(x_t, t, alpha_bar, cond)?;
        let (_, grad_input) = self.backward_core(&tape, cotangent);
        let skip = tape.skip_scale;
        let data = grad_input.channel(0).iter().zip(cotangent.data()).map(|(g, c)| g + skip * c).collect();
        ImageGrid::new(x_t.height(), x_t.width(), data)
    }

    /// Forward pass plus gradients of `⟨grad_of_eps, ε⟩` with respect to all
    /// parameters, where `grad_of_eps` is produced from the prediction.
    pub fn forward_backward(
        &self,
        x_t: &ImageGrid,
        t: usize,
        alpha_bar: f64,
        cond: Option<&ImageGrid>,
        grad_of_eps: impl FnOnce(&ImageGrid) -> Result<ImageGrid>,
    ) -> Result<(ImageGrid, ConvParamGrads)> {
        let (eps, tape) = self.run(x_t, t, alpha_bar, cond)?;
        let cot = grad_of_eps(&eps)?;
        eps.ensure_same_shape(&cot)?;
        let (grad_pre, _) = self.backward_core(&tape, &cot);
        let n_hidden = self.arch.hidden_layers();
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in 0..n_hidden {
            let src = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            layers.push(self.layers[l].backward_params(src, &grad_pre[l]));
        }
        layers.push(self.layers[n_hidden].backward_params(&tape.post[n_hidden - 1], &FeatureMap::from_grid(&cot)));
        let hidden = self.arch.hidden_channels;
        let p = &self.time;
        let mut time_bias = vec![0.0; p.outputs];
        for l in 0..n_hidden {
            for c in 0..hidden {
                time_bias[l * hidden + c] = grad_pre[l].channel(c).iter().sum();
            }
        }
        let mut time_weight = vec![0.0; p.weight.len()];
        for o in 0..p.outputs {
            for (i, e) in tape.embedding.iter().enumerate() {
                time_weight[o * p.inputs + i] = time_bias[o] * e;
            }
        }
        Ok((
            eps,
            ConvParamGrads {
                layers,
                time_weight,
                time_bias,
            },
        ))
    }

    /// Flat view of all parameters in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut f64> {
        let mut out: Vec<&mut f64> = Vec::with_capacity(self.num_params());
        for layer in &mut self.layers {
            out.extend(layer.weight.iter_mut());
            out.extend(layer.bias.iter_mut());
        }
        out.extend(self.time.weight.iter_mut());
        out.extend(self.time.bias.iter_mut());
        out
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
        }
        out.extend_from_slice(&self.time.weight);
        out.extend_from_slice(&self.time.bias);
        out
    }
}

impl ConvParamGrads {
    /// Same order as [`ConvDenoiserParams::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(&g.weight);
            out.extend_from_slice(&g.bias);
        }
        out.extend_from_slice(&self.time_weight);
        out.extend_from_slice(&self.time_bias);
        out
    }
}
