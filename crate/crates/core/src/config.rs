//! Experiment configuration (TOML).
//!
//! Every table rejects unknown keys, and [`ExperimentConfig::validate`] runs
//! before any compute so a bad file fails fast with a named field.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/demo"
//!
//! [dataset]
//! source = "synthetic"
//! train_images = 32
//! test_images = 16
//! size = 64
//!
//! [[guidance]]
//! kind = "visual"
//! rho = 1.0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{ConvArch, TrainConfig};
use crate::error::{Error, Result};
use crate::guidance::{GuidancePolicy, RhoDecay};
use crate::nn::Activation;
use crate::perceptual::{PerceptualWeights, DEFAULT_EXTRACTOR_SEED};
use crate::pipeline::KernelSpec;
use crate::pipeline::MIN_SYNTH_SIZE;
use crate::sampler::InitMode;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::visual::SpectralLossConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.kind, self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub num_steps: usize,
    pub eta: f64,
    pub init: InitMode,
    /// Largest step of the sampling grid; defaults to the schedule length.
    pub start_step: Option<usize>,
    pub policy: GuidancePolicy,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            num_steps: 50,
            eta: 0.0,
            init: InitMode::PureNoise,
            start_step: None,
            policy: GuidancePolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceKind {
    Visual,
    Perceptual,
    DataFidelity,
}

impl GuidanceKind {
    pub fn label(self) -> &'static str {
        match self {
            GuidanceKind::Visual => "visual",
            GuidanceKind::Perceptual => "perceptual",
            GuidanceKind::DataFidelity => "data_fidelity",
        }
    }
}

/// How a prior enters the model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// Loss gradient added to the predicted noise at sampling time.
    #[default]
    GradInNoise,
    /// Loss added to the training objective; no sampling-time correction.
    LossInTraining,
}

/// What a visual or perceptual term compares `x̂₀` against during sampling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    /// The ground-truth high-resolution image (synthetic evaluation only).
    #[default]
    Hr,
    /// The bicubic upsampling of the low-resolution input.
    UpsampledLr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    pub kind: GuidanceKind,
    pub rho: f64,
    #[serde(default)]
    pub decay: RhoDecay,
    #[serde(default)]
    pub injection: Injection,
    #[serde(default)]
    pub reference: ReferenceSource,
}

impl GuidanceSpec {
    pub fn new(kind: GuidanceKind, rho: f64) -> Self {
        Self {
            kind,
            rho,
            decay: RhoDecay::Constant,
            injection: Injection::GradInNoise,
            reference: ReferenceSource::Hr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        train_images: usize,
        test_images: usize,
        size: usize,
    },
    /// Directories of high-resolution PGM/PNG files; LR inputs are
    /// synthesized with the configured degradation.
    Directory { train_dir: PathBuf, test_dir: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            train_images: 32,
            test_images: 16,
            size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    pub scale: usize,
    pub kernel: KernelSpec,
    pub noise_std: f64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            kernel: KernelSpec::default(),
            noise_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualConfig {
    pub extractor_seed: u64,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub activation: Activation,
    pub segmenter_classes: usize,
    pub segmenter_temperature: f64,
    pub weights: PerceptualWeights,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            extractor_seed: DEFAULT_EXTRACTOR_SEED,
            channels: vec![1, 8, 16, 16],
            kernel: 3,
            activation: Activation::Tanh,
            segmenter_classes: 4,
            segmenter_temperature: 0.05,
            weights: PerceptualWeights::default(),
        }
    }
}

/// Settings used only by the ablation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Fine-tuning budget given to both arms of the injection comparison.
    pub fine_tune_iterations: usize,
    pub rho_visual: f64,
    pub rho_perceptual: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            fine_tune_iterations: 200,
            rho_visual: 1.0,
            rho_perceptual: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub schedule: ScheduleConfig,
    pub model: ConvArch,
    pub train: TrainConfig,
    pub sampler: SamplerSection,
    pub dataset: DatasetConfig,
    pub degradation: DegradationConfig,
    pub visual: SpectralLossConfig,
    pub perceptual: PerceptualConfig,
    pub ablation: AblationConfig,
    pub guidance: Vec<GuidanceSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            schedule: ScheduleConfig::default(),
            model: ConvArch::default(),
            train: TrainConfig::default(),
            sampler: SamplerSection::default(),
            dataset: DatasetConfig::default(),
            degradation: DegradationConfig::default(),
            visual: SpectralLossConfig::default(),
            perceptual: PerceptualConfig::default(),
            ablation: AblationConfig::default(),
            guidance: Vec::new(),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let sched = self.schedule.build()?;
        self.model.validate()?;
        self.visual.validate()?;

        let t = &self.train;
        if t.batch_size == 0 || !(t.learning_rate >= 0.0) || !(0.0..1.0).contains(&t.momentum) {
            return Err(bad("train: batch_size > 0, learning_rate >= 0 and momentum in [0, 1) required"));
        }
        if t.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(bad("train.grad_clip must be > 0"));
        }
        if t.max_timestep.is_some_and(|m| m == 0 || m > sched.num_steps()) {
            return Err(bad(format!("train.max_timestep must be in 1..={}", sched.num_steps())));
        }

        let s = &self.sampler;
        let start = s.start_step.unwrap_or(sched.num_steps());
        if start == 0 || start > sched.num_steps() {
            return Err(bad(format!("sampler.start_step must be in 1..={}", sched.num_steps())));
        }
        if s.num_steps == 0 || s.num_steps > start {
            return Err(bad(format!("sampler.num_steps must be in 1..={start}")));
        }
        if !(0.0..=1.0).contains(&s.eta) {
            return Err(bad("sampler.eta must be in [0, 1]"));
        }
        s.policy.validate(sched.num_steps())?;
        if s.init == InitMode::LrPlusNoise && !self.model.conditioned {
            return Err(bad("sampler.init = lr_plus_noise requires a conditioned model"));
        }

        let d = &self.degradation;
        if d.scale == 0 || !(d.noise_std >= 0.0) {
            return Err(bad("degradation: scale > 0 and noise_std >= 0 required"));
        }
        d.kernel.build()?;

        match &self.dataset {
            DatasetConfig::Synthetic {
                train_images,
                test_images,
                size,
            } => {
                if *train_images == 0 || *test_images == 0 {
                    return Err(bad("dataset: train_images and test_images must be positive"));
                }
                if *size < MIN_SYNTH_SIZE || size % d.scale != 0 {
                    return Err(bad(format!(
                        "dataset.size must be >= {MIN_SYNTH_SIZE} and divisible by the scale {}",
                        d.scale
                    )));
                }
                if let Some(c) = t.crop {
                    if c == 0 || c > *size {
                        return Err(bad(format!("train.crop {c} does not fit size {size}")));
                    }
                }
            }
            DatasetConfig::Directory { train_dir, test_dir } => {
                for dir in [train_dir, test_dir] {
                    if !dir.is_dir() {
                        return Err(bad(format!("dataset directory {} does not exist", dir.display())));
                    }
                }
            }
        }

        let p = &self.perceptual;
        if p.channels.len() < 2 || p.channels[0] != 1 || p.channels.contains(&0) || p.kernel % 2 == 0 {
            return Err(bad("perceptual: channels must start at 1 with >= 1 layer and kernel must be odd"));
        }
        if p.segmenter_classes == 0 || !(p.segmenter_temperature > 0.0) {
            return Err(bad("perceptual: segmenter_classes > 0 and segmenter_temperature > 0 required"));
        }
        if !(p.weights.feature >= 0.0 && p.weights.segmentation >= 0.0) {
            return Err(bad("perceptual weights must be >= 0"));
        }

        for (i, g) in self.guidance.iter().enumerate() {
            if !(g.rho >= 0.0 && g.rho.is_finite()) {
                return Err(bad(format!("guidance[{i}].rho must be finite and >= 0")));
            }
            if g.kind == GuidanceKind::DataFidelity && g.injection == Injection::LossInTraining {
                return Err(bad(format!("guidance[{i}]: data_fidelity supports only grad_in_noise")));
            }
            if self.guidance[..i].iter().any(|o| o.kind == g.kind) {
                return Err(bad(format!("guidance[{i}]: duplicate {} term", g.kind.label())));
            }
        }
        let a = &self.ablation;
        if !(a.rho_visual >= 0.0 && a.rho_perceptual >= 0.0) {
            return Err(bad("ablation rho values must be >= 0"));
        }
        Ok(())
    }

    /// Terms applied as sampling-time gradients.
    pub fn sampling_terms(&self) -> impl Iterator<Item = &GuidanceSpec> {
        self.guidance.iter().filter(|g| g.injection == Injection::GradInNoise)
    }

    /// Terms added to the training objective.
    pub fn training_terms(&self) -> impl Iterator<Item = &GuidanceSpec> {
        self.guidance.iter().filter(|g| g.injection == Injection::LossInTraining)
    }

    /// Row label for a run: active sampling-time terms joined by `+`, or
    /// `unguided`.
    pub fn label(&self) -> String {
        let names: Vec<&str> = self.sampling_terms().filter(|g| g.rho > 0.0).map(|g| g.kind.label()).collect();
        if names.is_empty() {
            "unguided".to_string()
        } else {
            names.join("+")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn parses_a_small_file() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            seed = 3
            [dataset]
            source = "synthetic"
            train_images = 4
            test_images = 2
            size = 32
            [train]
            iterations = 10
            crop = 16
            [sampler]
            num_steps = 20
            init = "lr_plus_noise"
            [sampler.policy]
            clip_rms = 2.0
            jacobian = "x0_detached"
            [[guidance]]
            kind = "visual"
            rho = 0.5
            [[guidance]]
            kind = "perceptual"
            rho = 1.0
            injection = "loss_in_training"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.sampler.policy.clip_rms, Some(2.0));
        assert_eq!(cfg.label(), "visual");
        assert_eq!(cfg.training_terms().count(), 1);
    }

    #[test]
    fn rejects_unknown_keys_everywhere() {
        assert!(ExperimentConfig::from_toml("sed = 1").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nlr = 1.0").is_err());
        assert!(ExperimentConfig::from_toml("[[guidance]]\nkind = \"visual\"\nrho = 1.0\nweight = 2").is_err());
        assert!(ExperimentConfig::from_toml("[dataset]\nsource = \"synthetic\"\ntrain_images = 1\ntest_images = 1\nsize = 64\nextra = 1").is_err());
    }

    #[test]
    fn rejects_invalid_values() {
        assert!(ExperimentConfig::from_toml("[[guidance]]\nkind = \"visual\"\nrho = -1.0").is_err());
        assert!(ExperimentConfig::from_toml("[[guidance]]\nkind = \"sharpness\"\nrho = 1.0").is_err());
        assert!(ExperimentConfig::from_toml("[sampler]\nnum_steps = 5000").is_err());
        assert!(ExperimentConfig::from_toml("[sampler]\nstart_step = 10\nnum_steps = 20").is_err());
        assert!(ExperimentConfig::from_toml("[dataset]\nsource = \"synthetic\"\ntrain_images = 1\ntest_images = 1\nsize = 30").is_err());
        let missing = "[dataset]\nsource = \"directory\"\ntrain_dir = \"/nonexistent/a\"\ntest_dir = \"/nonexistent/b\"";
        assert!(ExperimentConfig::from_toml(missing).is_err());
        let dup = "[[guidance]]\nkind = \"visual\"\nrho = 1.0\n[[guidance]]\nkind = \"visual\"\nrho = 2.0";
        assert!(ExperimentConfig::from_toml(dup).is_err());
    }
}
