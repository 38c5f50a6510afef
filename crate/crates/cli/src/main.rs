//! `gdsr`: train, sample, ablate and verify.
//!
//! Exit codes: 0 on success, 1 when a check fails or a run errors after
//! validation, 2 on usage or configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gdsr_core::config::ExperimentConfig;
use gdsr_core::experiment::{run_ablation, run_sr, run_train};
use gdsr_core::verify::{check_ablation, check_toy_sr, run_verify, toy_sr_config};
use gdsr_core::Error;

#[derive(Parser)]
#[command(name = "gdsr", version, about = "Loss-gradient guided diffusion super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser; writes checkpoint.json and loss.csv.
    Train(Common),
    /// Super-resolve the test set; writes sr/*.pgm and metrics.csv.
    Sr {
        #[command(flatten)]
        common: Common,
        /// Weights to sample with [default: <out>/checkpoint.json].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write per-step trajectories as JSON Lines.
        #[arg(long)]
        trajectories: bool,
    },
    /// Run the guidance and injection-mode ablation; writes ablation.csv.
    Ablate(Common),
    /// Run the self-check suite.
    Verify {
        /// Also run the end-to-end toy super-resolution and ablation checks.
        #[arg(long)]
        full: bool,
        /// Config for the full checks [default: built-in toy config].
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the ablation check.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    /// Unreadable or invalid configuration.
    Usage(Error),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e),
            other => Failure::Run(other),
        }
    }
}

fn load(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path).map_err(Failure::Usage)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load(&c.config, c.seed, c.out)?;
            let s = run_train(&cfg, &cfg.out_dir)?;
            println!("checkpoint: {}", s.checkpoint.display());
            if let (Some(a), Some(b)) = (s.initial_loss, s.final_loss) {
                println!("loss: {a:.6} -> {b:.6}");
            }
        }
        Command::Sr {
            common,
            checkpoint,
            trajectories,
        } => {
            let cfg = load(&common.config, common.seed, common.out)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join("checkpoint.json"));
            let s = run_sr(&cfg, &ckpt, &cfg.out_dir, trajectories)?;
            for (name, a) in [("bicubic", s.bicubic), (s.method.as_str(), s.aggregate)] {
                println!("{name}: psnr {:.3} dB, ssim {:.4}, visual_loss {:.5}", a.psnr, a.ssim, a.visual_loss);
            }
        }
        Command::Ablate(c) => {
            let cfg = load(&c.config, c.seed, c.out)?;
            for r in run_ablation(&cfg, &cfg.out_dir)? {
                println!(
                    "{}/{}/{}: psnr {:.3} dB, ssim {:.4}, visual_loss {:.5}",
                    r.group, r.cell, r.injection, r.psnr, r.ssim, r.visual_loss
                );
            }
        }
        Command::Verify { full, config, seed, out } => {
            let mut report = run_verify();
            if full {
                let mut cfg = match config {
                    Some(p) => load(&p, seed, None)?,
                    None => toy_sr_config(seed.unwrap_or(0)),
                };
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                let out = out.unwrap_or_else(|| cfg.out_dir.join("verify"));
                report.checks.push(check_toy_sr(&cfg));
                report.checks.push(check_ablation(&cfg, &out));
            }
            println!("{report}");
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
