//! Stage one: partial-convolution inpainting of axial PET-CT slices.

pub mod loss;
pub mod metrics;
pub mod network;
pub mod train;

pub use loss::{inpaint_loss, FeaturePyramid, InpaintLossTerms, InpaintLossWeights};
pub use metrics::{quality_metrics, InpaintQualityReport, PSNR_CAP_DB};
pub use network::{inpaint_slice, InpaintNetConfig, InpaintNetwork, Phase};
pub use train::{
    collect_healthy_slices, write_inpaint_log_csv, HealthySlice, InpaintEpochLog,
    InpaintTrainConfig, InpaintTrainer,
};
