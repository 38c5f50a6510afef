//! Experiment runners behind the `train`, `sr` and `ablate` commands.
//!
//! Random streams are fixed per purpose so that any output depends only on
//! the configuration and its seed:
//!
//! | stream | use |
//! |---|---|
//! | 0 | denoiser weight initialization |
//! | 1 | training minibatches |
//! | 10 | synthetic dataset (split per image) |
//! | 11 | degradation noise (split per image) |
//! | 2³² + i | sampling chain for test image i |
//!
//! Output files:
//!
//! - `loss.csv`: `iteration,loss`
//! - `metrics.csv`: `image,method,seed,psnr,ssim,visual_loss`, per-image rows
//!   followed by one `aggregate` row per method
//! - `ablation.csv`: `group,cell,injection,seed,psnr,ssim,visual_loss`
//! - `manifest.json`: command, seed, config hash, crate version and the
//!   full effective config

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_denoiser, save_denoiser};
use crate::config::{DatasetConfig, ExperimentConfig, GuidanceKind, GuidanceSpec, Injection, ReferenceSource};
use crate::denoiser::{train_denoiser, AuxiliaryLoss, ConvDenoiserParams, DenoiserModel, TrainOutcome, TrainingPair};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::guidance::{make_data_fidelity_term, make_reference_term, GuidanceTerm, ReferenceLoss};
use crate::perceptual::{FeatureExtractor, PerceptualPrior, SoftSegmenter};
use crate::pipeline::{psnr, read_image, ssim, synth_thermal_dataset, upsample_bicubic, write_image, DegradationModel, MetricsReport};
use crate::rng::Rng;
use crate::sampler::{guided_sample, SamplerConfig, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::visual::{visual_loss, VisualPrior};

const DATA_STREAM: u64 = 10;
const DEGRADE_STREAM: u64 = 11;
const SAMPLE_STREAM_BASE: u64 = 1 << 32;

/// A high-resolution image with its degraded input and the bicubic
/// upsampling used as conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct SrPair {
    pub id: String,
    pub hr: ImageGrid,
    pub lr: ImageGrid,
    pub cond: ImageGrid,
}

/// Everything derived from a config before any training or sampling.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub schedule: NoiseSchedule,
    pub degradation: DegradationModel,
    pub train: Vec<SrPair>,
    pub test: Vec<SrPair>,
    pub visual: Arc<VisualPrior>,
    pub perceptual: Arc<PerceptualPrior>,
}

/// Mean metrics over a set of images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub visual_loss: f64,
}

impl Aggregate {
    pub fn of(reports: &[MetricsReport]) -> Self {
        let n = reports.len().max(1) as f64;
        Self {
            psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
            visual_loss: reports.iter().map(|r| r.visual_loss).sum::<f64>() / n,
        }
    }
}

fn list_images(dir: &Path) -> Result<Vec<(String, ImageGrid)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .pgm or .png images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            Ok((id, read_image(p)?))
        })
        .collect()
}

fn make_pairs(images: Vec<(String, ImageGrid)>, degradation: &DegradationModel, seed: u64, offset: usize) -> Result<Vec<SrPair>> {
    let noise_root = Rng::with_stream(seed, DEGRADE_STREAM);
    images
        .into_iter()
        .enumerate()
        .map(|(i, (id, hr))| {
            let mut rng = noise_root.split((offset + i) as u64);
            let lr = degradation.degrade(&hr, Some(&mut rng))?;
            let cond = upsample_bicubic(&lr, degradation.scale)?;
            Ok(SrPair { id, hr, lr, cond })
        })
        .collect()
}

pub fn build_extractor(cfg: &ExperimentConfig) -> Result<FeatureExtractor> {
    let p = &cfg.perceptual;
    FeatureExtractor::seeded(&p.channels, p.kernel, p.activation, p.extractor_seed)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let schedule = cfg.schedule.build()?;
    let d = &cfg.degradation;
    let degradation = DegradationModel::new(d.scale, d.kernel, d.noise_std)?;
    let (train, test) = match &cfg.dataset {
        DatasetConfig::Synthetic {
            train_images,
            test_images,
            size,
        } => {
            let all = synth_thermal_dataset(train_images + test_images, *size, &Rng::with_stream(cfg.seed, DATA_STREAM));
            let named = |range: std::ops::Range<usize>, prefix: &str| -> Vec<(String, ImageGrid)> {
                range.map(|i| (format!("{prefix}_{i:03}"), all[i].clone())).collect()
            };
            let n = *train_images;
            (named(0..n, "train"), named(n..n + test_images, "test"))
        }
        DatasetConfig::Directory { train_dir, test_dir } => (list_images(train_dir)?, list_images(test_dir)?),
    };
    let n_train = train.len();
    let perceptual = PerceptualPrior {
        extractor: Arc::new(build_extractor(cfg)?),
        segmenter: SoftSegmenter::evenly_spaced(cfg.perceptual.segmenter_classes, cfg.perceptual.segmenter_temperature)?,
        weights: cfg.perceptual.weights,
    };
    Ok(Prepared {
        config: cfg.clone(),
        schedule,
        train: make_pairs(train, &degradation, cfg.seed, 0)?,
        test: make_pairs(test, &degradation, cfg.seed, n_train)?,
        degradation,
        visual: Arc::new(VisualPrior { config: cfg.visual }),
        perceptual: Arc::new(perceptual),
    })
}

impl Prepared {
    fn prior(&self, kind: GuidanceKind) -> Option<Arc<dyn ReferenceLoss>> {
        match kind {
            GuidanceKind::Visual => Some(self.visual.clone()),
            GuidanceKind::Perceptual => Some(self.perceptual.clone()),
            GuidanceKind::DataFidelity => None,
        }
    }

    pub fn initial_params(&self) -> Result<ConvDenoiserParams> {
        ConvDenoiserParams::init(self.config.model.clone(), self.config.seed)
    }

    pub fn training_pairs(&self) -> Vec<TrainingPair> {
        let conditioned = self.config.model.conditioned;
        self.train
            .iter()
            .map(|p| TrainingPair {
                hr: p.hr.clone(),
                cond: conditioned.then(|| p.cond.clone()),
            })
            .collect()
    }

    /// Auxiliary training losses for the visual/perceptual specs in `specs`.
    pub fn auxiliary_losses(&self, specs: &[GuidanceSpec]) -> Vec<AuxiliaryLoss> {
        specs
            .iter()
            .filter_map(|g| self.prior(g.kind).map(|prior| AuxiliaryLoss { weight: 1.0, prior }))
            .collect()
    }

    /// Trains from `init` for `iterations` steps with the config's optimizer.
    pub fn train(&self, init: ConvDenoiserParams, iterations: usize, aux: &[AuxiliaryLoss]) -> Result<TrainOutcome> {
        let train_cfg = crate::denoiser::TrainConfig {
            iterations,
            seed: self.config.seed,
            ..self.config.train.clone()
        };
        train_denoiser(init, &self.training_pairs(), &self.schedule, &train_cfg, aux)
    }

    /// Sampling-time guidance terms for one test pair.
    pub fn terms_for(&self, pair: &SrPair, specs: &[GuidanceSpec]) -> Result<Vec<GuidanceTerm>> {
        specs
            .iter()
            .filter(|g| g.injection == Injection::GradInNoise)
            .map(|g| {
                let term = match self.prior(g.kind) {
                    None => make_data_fidelity_term(pair.lr.clone(), self.degradation.clone(), g.rho)?,
                    Some(prior) => {
                        let reference = match g.reference {
                            ReferenceSource::Hr => pair.hr.clone(),
                            ReferenceSource::UpsampledLr => pair.cond.clone(),
                        };
                        make_reference_term(reference, prior, g.rho)?
                    }
                };
                Ok(term.with_decay(g.decay))
            })
            .collect()
    }

    /// Super-resolves every test pair with the given sampling-time terms.
    /// Image `i` samples on its own stream, so results do not depend on
    /// scheduling.
    pub fn super_resolve(&self, params: &ConvDenoiserParams, specs: &[GuidanceSpec], record: bool) -> Result<Vec<(ImageGrid, Trajectory)>> {
        if params.arch != self.config.model {
            return Err(Error::Config("checkpoint architecture does not match [model]".into()));
        }
        let model = DenoiserModel::Conv(params.clone());
        let s = &self.config.sampler;
        self.test
            .par_iter()
            .enumerate()
            .map(|(i, pair)| {
                let cfg = SamplerConfig {
                    num_steps: s.num_steps,
                    eta: s.eta,
                    seed: self.config.seed,
                    stream: SAMPLE_STREAM_BASE + i as u64,
                    terms: self.terms_for(pair, specs)?,
                    policy: s.policy,
                    init: s.init,
                    start_step: s.start_step,
                    record_trajectory: record,
                };
                let cond = model.is_conditioned().then_some(&pair.cond);
                guided_sample(&model, cond, pair.hr.shape(), &cfg, &self.schedule)
            })
            .collect()
    }

    /// PSNR / SSIM / visual loss of `outputs` against the test HR images.
    pub fn evaluate(&self, outputs: &[ImageGrid]) -> Result<Vec<MetricsReport>> {
        self.test
            .iter()
            .zip(outputs)
            .map(|(pair, out)| {
                Ok(MetricsReport {
                    image: pair.id.clone(),
                    psnr: psnr(&pair.hr, out, 1.0)?,
                    ssim: ssim(&pair.hr, out)?,
                    visual_loss: visual_loss(&pair.hr, out, &self.config.visual)?,
                })
            })
            .collect()
    }

    pub fn bicubic_outputs(&self) -> Vec<ImageGrid> {
        self.test.iter().map(|p| p.cond.clamp(0.0, 1.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub crate_version: String,
    pub outputs: Vec<String>,
    pub config: ExperimentConfig,
}

fn write_manifest(out: &Path, command: &str, cfg: &ExperimentConfig, outputs: Vec<String>) -> Result<()> {
    let manifest = Manifest {
        command: command.to_string(),
        seed: cfg.seed,
        config_sha256: cfg.hash(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        outputs,
        config: cfg.clone(),
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Trains the denoiser (with auxiliary losses for `loss_in_training`
/// terms) and writes `checkpoint.json`, `loss.csv` and `manifest.json`.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    let prep = prepare(cfg)?;
    create_dir(out)?;
    let specs: Vec<GuidanceSpec> = cfg.training_terms().cloned().collect();
    let outcome = prep.train(prep.initial_params()?, cfg.train.iterations, &prep.auxiliary_losses(&specs))?;

    let checkpoint = out.join("checkpoint.json");
    save_denoiser(&outcome.params, &checkpoint)?;
    let loss_path = out.join("loss.csv");
    let mut w = csv_writer(&loss_path)?;
    w.write_record(["iteration", "loss"]).map_err(|e| csv_error(&loss_path, e))?;
    for (i, l) in outcome.loss_trace.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(|e| csv_error(&loss_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&loss_path, e))?;
    write_manifest(out, "train", cfg, vec!["checkpoint.json".into(), "loss.csv".into()])?;
    Ok(TrainSummary {
        checkpoint,
        initial_loss: outcome.loss_trace.first().copied(),
        final_loss: outcome.loss_trace.last().copied(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetricsRow<'a> {
    image: &'a str,
    method: &'a str,
    seed: u64,
    psnr: f64,
    ssim: f64,
    visual_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrSummary {
    pub method: String,
    pub reports: Vec<MetricsReport>,
    pub aggregate: Aggregate,
    pub bicubic: Aggregate,
}

/// Samples every test image with the config's `grad_in_noise` terms and
/// writes `sr/*.pgm`, `metrics.csv` (bicubic and sampled rows), optional
/// `trajectories/*.jsonl` and `manifest.json`.
pub fn run_sr(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path, trajectories: bool) -> Result<SrSummary> {
    let prep = prepare(cfg)?;
    let params = load_denoiser(checkpoint)?;
    create_dir(&out.join("sr"))?;
    let results = prep.super_resolve(&params, &cfg.guidance, trajectories)?;
    let outputs: Vec<ImageGrid> = results.iter().map(|(img, _)| img.clone()).collect();
    let mut written = vec!["metrics.csv".to_string()];
    for (pair, img) in prep.test.iter().zip(&outputs) {
        let name = format!("sr/{}.pgm", pair.id);
        write_image(img, out.join(&name))?;
        written.push(name);
    }
    if trajectories {
        create_dir(&out.join("trajectories"))?;
        for (pair, (_, traj)) in prep.test.iter().zip(&results) {
            let name = format!("trajectories/{}.jsonl", pair.id);
            let path = out.join(&name);
            fs::write(&path, traj.to_jsonl()).map_err(|e| Error::io(&path, e))?;
            written.push(name);
        }
    }

    let method = cfg.label();
    let bicubic = prep.evaluate(&prep.bicubic_outputs())?;
    let reports = prep.evaluate(&outputs)?;
    let path = out.join("metrics.csv");
    let mut w = csv_writer(&path)?;
    for (label, rows) in [("bicubic", &bicubic), (method.as_str(), &reports)] {
        for r in rows.iter() {
            w.serialize(MetricsRow {
                image: &r.image,
                method: label,
                seed: cfg.seed,
                psnr: r.psnr,
                ssim: r.ssim,
                visual_loss: r.visual_loss,
            })
            .map_err(|e| csv_error(&path, e))?;
        }
    }
    for (label, rows) in [("bicubic", &bicubic), (method.as_str(), &reports)] {
        let a = Aggregate::of(rows);
        w.serialize(MetricsRow {
            image: "aggregate",
            method: label,
            seed: cfg.seed,
            psnr: a.psnr,
            ssim: a.ssim,
            visual_loss: a.visual_loss,
        })
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_manifest(out, "sr", cfg, written)?;
    Ok(SrSummary {
        method,
        aggregate: Aggregate::of(&reports),
        bicubic: Aggregate::of(&bicubic),
        reports,
    })
}

/// One row of `ablation.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `combination` for the guidance matrix, `injection` for the
    /// comparison of how the priors enter the model.
    pub group: String,
    pub cell: String,
    pub injection: String,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub visual_loss: f64,
}

fn prior_spec(cfg: &ExperimentConfig, kind: GuidanceKind, rho: f64, injection: Injection) -> GuidanceSpec {
    let reference = cfg.guidance.iter().find(|g| g.kind == kind).map_or(ReferenceSource::Hr, |g| g.reference);
    GuidanceSpec {
        injection,
        reference,
        ..GuidanceSpec::new(kind, rho)
    }
}

/// Runs the guidance matrix {none, visual, perceptual, both} on a trained
/// base model, then the injection comparison: two equal-budget fine-tunes
/// of the base model, one on the plain objective and sampled with both
/// priors as noise gradients, one with both priors added to the objective
/// and sampled without them. A `data_fidelity` term in the config is
/// applied to every cell. Writes `ablation.csv` and `manifest.json`.
pub fn run_ablation(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let prep = prepare(cfg)?;
    create_dir(out)?;
    let a = &cfg.ablation;
    let base_terms: Vec<GuidanceSpec> = cfg.guidance.iter().filter(|g| g.kind == GuidanceKind::DataFidelity).cloned().collect();
    let visual = |inj| prior_spec(cfg, GuidanceKind::Visual, a.rho_visual, inj);
    let perceptual = |inj| prior_spec(cfg, GuidanceKind::Perceptual, a.rho_perceptual, inj);
    let with_base = |extra: Vec<GuidanceSpec>| -> Vec<GuidanceSpec> { base_terms.iter().cloned().chain(extra).collect() };

    let base = prep.train(prep.initial_params()?, cfg.train.iterations, &[])?.params;
    let mut rows = Vec::with_capacity(6);
    let mut push = |group: &str, cell: &str, injection: Injection, params: &ConvDenoiserParams, specs: Vec<GuidanceSpec>| -> Result<()> {
        let outputs: Vec<ImageGrid> = prep.super_resolve(params, &specs, false)?.into_iter().map(|(x, _)| x).collect();
        let agg = Aggregate::of(&prep.evaluate(&outputs)?);
        rows.push(AblationRow {
            group: group.into(),
            cell: cell.into(),
            injection: match injection {
                Injection::GradInNoise => "grad_in_noise".into(),
                Injection::LossInTraining => "loss_in_training".into(),
            },
            seed: cfg.seed,
            psnr: agg.psnr,
            ssim: agg.ssim,
            visual_loss: agg.visual_loss,
        });
        Ok(())
    };

    let g = Injection::GradInNoise;
    push("combination", "none", g, &base, with_base(vec![]))?;
    push("combination", "visual", g, &base, with_base(vec![visual(g)]))?;
    push("combination", "perceptual", g, &base, with_base(vec![perceptual(g)]))?;
    push("combination", "both", g, &base, with_base(vec![visual(g), perceptual(g)]))?;

    let budget = a.fine_tune_iterations;
    let plain = prep.train(base.clone(), budget, &[])?.params;
    push("injection", "both", g, &plain, with_base(vec![visual(g), perceptual(g)]))?;
    let l = Injection::LossInTraining;
    let aux = prep.auxiliary_losses(&[visual(l), perceptual(l)]);
    let tuned = prep.train(base, budget, &aux)?.params;
    push("injection", "both", l, &tuned, with_base(vec![]))?;

    let path = out.join("ablation.csv");
    let mut w = csv_writer(&path)?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_manifest(out, "ablate", cfg, vec!["ablation.csv".into()])?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetConfig;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset = DatasetConfig::Synthetic {
            train_images: 3,
            test_images: 2,
            size: 16,
        };
        cfg.train.iterations = 3;
        cfg.train.crop = Some(16);
        cfg.train.batch_size = 2;
        cfg.model.hidden_channels = 4;
        cfg.model.depth = 2;
        cfg.sampler.num_steps = 4;
        cfg
    }

    #[test]
    fn prepare_is_deterministic_and_shaped() {
        let cfg = tiny();
        let a = prepare(&cfg).unwrap();
        let b = prepare(&cfg).unwrap();
        assert_eq!(a.test, b.test);
        assert_eq!(a.train.len(), 3);
        assert_eq!(a.test[0].lr.shape(), (4, 4));
        assert_eq!(a.test[0].cond.shape(), (16, 16));
        assert_ne!(a.train[0].hr, a.test[0].hr);
    }

    #[test]
    fn sr_rejects_mismatched_checkpoint() {
        let prep = prepare(&tiny()).unwrap();
        let mut arch = tiny().model;
        arch.hidden_channels = 5;
        let other = ConvDenoiserParams::init(arch, 0).unwrap();
        assert!(prep.super_resolve(&other, &[], false).is_err());
    }

    #[test]
    fn data_fidelity_reference_is_the_lr_image() {
        let prep = prepare(&tiny()).unwrap();
        let terms = prep
            .terms_for(&prep.test[0], &[GuidanceSpec::new(GuidanceKind::DataFidelity, 1.0)])
            .unwrap();
        assert_eq!(terms[0].name, "data_fidelity");
        let at_hr = terms[0].loss.loss(&prep.test[0].hr).unwrap();
        assert!(at_hr < 1e-20, "{at_hr}");
    }
}
