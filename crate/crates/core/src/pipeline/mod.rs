//! Low-resolution synthesis, resampling, reference metrics, synthetic
//! thermal-style data and image files.

pub mod degrade;
pub mod imageio;
pub mod metrics;
pub mod resample;
pub mod synth;

pub use degrade::{DegradationModel, KernelSpec};
pub use imageio::{read_image, write_image};
pub use metrics::{psnr, ssim, ssim_with_peak, MetricsReport, PSNR_CAP_DB};
pub use resample::upsample_bicubic;
pub use synth::{synth_thermal_dataset, MIN_SYNTH_SIZE};
