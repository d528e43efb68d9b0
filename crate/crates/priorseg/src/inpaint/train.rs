//! Two-phase inpainter training on healthy axial slices.
//!
//! Phase one trains everything; phase two freezes the encoder batch-norm
//! (running statistics and affine parameters) and drops the learning rate.
//! Training corruption masks are drawn fresh per slice per epoch.

use std::io::Write;
use std::path::Path;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::CaseRecord;
use crate::maskgen::{random_irregular_mask, MaskGenConfig};
use crate::preprocess::{clip_scale_normalize, ClipScaleParams};
use crate::slicer::{volume_to_rgb_slices, RgbSlice};
use crate::volume::{load_volume, Modality};

use super::loss::{inpaint_loss, FeaturePyramid, InpaintLossWeights};
use super::network::{pad_to_multiple, InpaintNetConfig, InpaintNetwork, Phase};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InpaintTrainConfig {
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub lr_phase1: f32,
    pub lr_phase2: f32,
    pub freeze_encoder_batchnorm_phase2: bool,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for InpaintTrainConfig {
    fn default() -> Self {
        Self {
            epochs_phase1: 150,
            epochs_phase2: 150,
            lr_phase1: 1e-4,
            lr_phase2: 5e-5,
            freeze_encoder_batchnorm_phase2: true,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl InpaintTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_phase2 < self.lr_phase1) {
            return Err(Error::Invariant(format!(
                "phase-2 learning rate {} must be below phase-1 rate {}",
                self.lr_phase2, self.lr_phase1
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Invariant("batch_size must be positive".into()));
        }
        if !(self.lr_phase1 > 0.0) {
            return Err(Error::Invariant("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One training slice plus the provenance needed for the leak check.
#[derive(Debug, Clone)]
pub struct HealthySlice {
    pub rgb: RgbSlice,
    pub label_plane_empty: bool,
}

/// Load each case, apply the fixed-window normalization, slice axially and
/// keep only slices whose label plane is empty.
pub fn collect_healthy_slices(cases: &[CaseRecord]) -> Result<Vec<HealthySlice>> {
    let mut out = Vec::new();
    for case in cases {
        let ct = load_volume(&case.ct_path, Modality::CtHu)?;
        let pet = load_volume(&case.pet_path, Modality::PetSuv)?;
        let label = load_volume(&case.label_path, Modality::Label)?;
        ct.ensure_same_grid(&label, &format!("case '{}' CT vs label", case.case_id))?;
        let ct_norm = clip_scale_normalize(&ct, &ClipScaleParams::ct())?;
        let pet_norm = clip_scale_normalize(&pet, &ClipScaleParams::pet())?;
        let stack = volume_to_rgb_slices(&ct_norm, &pet_norm, &case.case_id)?;
        for slice in stack.slices {
            let plane = label.data().slice(ndarray::s![.., .., slice.z_index]);
            if plane.iter().all(|&v| v == 0.0) {
                out.push(HealthySlice { rgb: slice, label_plane_empty: true });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct InpaintEpochLog {
    pub phase: u8,
    pub epoch: usize,
    pub lr: f32,
    pub valid: f64,
    pub hole: f64,
    pub perceptual: f64,
    pub style: f64,
    pub tv: f64,
    pub total: f64,
}

pub fn write_inpaint_log_csv(log: &[InpaintEpochLog], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "phase,epoch,lr,valid,hole,perceptual,style,tv,total").map_err(|e| Error::io(path, e))?;
    for row in log {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            row.phase, row.epoch, row.lr, row.valid, row.hole, row.perceptual, row.style, row.tv, row.total
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub struct InpaintTrainer {
    pub net_config: InpaintNetConfig,
    pub train_config: InpaintTrainConfig,
    pub mask_config: MaskGenConfig,
    pub loss_weights: InpaintLossWeights,
    /// Directory for per-phase checkpoints, when set.
    pub checkpoint_dir: Option<std::path::PathBuf>,
}

impl InpaintTrainer {
    /// Train on healthy slices and return the trained network plus the
    /// per-epoch loss log. Rejects an empty set and any slice with a
    /// nonzero label plane.
    pub fn train(&self, slices: &[HealthySlice]) -> Result<(InpaintNetwork, Vec<InpaintEpochLog>)> {
        self.train_config.validate()?;
        if slices.is_empty() {
            return Err(Error::DegenerateInput("inpainter training set is empty".into()));
        }
        for s in slices {
            if !s.label_plane_empty {
                return Err(Error::TrainingLeak {
                    case_id: s.rgb.case_id.clone(),
                    z_index: s.rgb.z_index,
                });
            }
        }
        let plane = slices[0].rgb.plane_shape();
        if slices.iter().any(|s| s.rgb.plane_shape() != plane) {
            return Err(Error::ShapeMismatch(
                "all training slices must share one plane shape".into(),
            ));
        }

        let mut net = InpaintNetwork::build(self.net_config.clone())?;
        let stride = net.config.stride_multiple();
        let pyramid = FeaturePyramid::fixed(self.net_config.seed ^ 0x5eed_f00d);
        let mut rng = ChaCha20Rng::seed_from_u64(self.train_config.seed);
        let mut log = Vec::new();

        // Pre-pad all slices once; masks are drawn per epoch at padded size.
        let padded: Vec<ndarray::Array3<f32>> = slices
            .iter()
            .map(|s| {
                let ones = ndarray::Array2::from_elem(plane, 1.0f32);
                pad_to_multiple(&s.rgb.pixels, &ones, stride).0
            })
            .collect();
        let (ph, pw) = (padded[0].dim().1, padded[0].dim().2);

        for (phase, epochs, lr) in [
            (Phase::One, self.train_config.epochs_phase1, self.train_config.lr_phase1),
            (Phase::Two, self.train_config.epochs_phase2, self.train_config.lr_phase2),
        ] {
            let phase_no: u8 = match phase {
                Phase::One => 1,
                Phase::Two => 2,
            };
            // When freezing is disabled, phase two trains like phase one at
            // the lower rate.
            let effective_phase = if phase_no == 2 && !self.train_config.freeze_encoder_batchnorm_phase2
            {
                Phase::One
            } else {
                phase
            };
            for epoch in 0..epochs {
                let mut order: Vec<usize> = (0..padded.len()).collect();
                order.shuffle(&mut rng);
                let mut terms_sum = [0.0f64; 6];
                let mut n_samples = 0usize;
                for chunk in order.chunks(self.train_config.batch_size) {
                    let b = chunk.len();
                    let mut x = Array4::<f32>::zeros((b, 3, ph, pw));
                    let mut mask = Array4::<f32>::zeros((b, 1, ph, pw));
                    let mut hole_masks = Vec::with_capacity(b);
                    for (bi, &si) in chunk.iter().enumerate() {
                        let m = random_irregular_mask((ph, pw), &self.mask_config, &mut rng)?;
                        let mf = m.to_f32();
                        x.index_axis_mut(Axis(0), bi).assign(&padded[si]);
                        mask.slice_mut(ndarray::s![bi, 0, .., ..]).assign(&mf);
                        hole_masks.push(mf);
                    }
                    let (y, trace) = net.forward(&x, &mask, effective_phase)?;
                    let mut dy = Array4::<f32>::zeros(y.raw_dim());
                    for (bi, &si) in chunk.iter().enumerate() {
                        let pred = y.index_axis(Axis(0), bi).to_owned();
                        let (terms, dpred) = inpaint_loss(
                            &pred,
                            &padded[si],
                            &hole_masks[bi],
                            &self.loss_weights,
                            Some(&pyramid),
                        )?;
                        terms_sum[0] += terms.valid;
                        terms_sum[1] += terms.hole;
                        terms_sum[2] += terms.perceptual;
                        terms_sum[3] += terms.style;
                        terms_sum[4] += terms.tv;
                        terms_sum[5] += terms.total;
                        n_samples += 1;
                        let scale = 1.0 / b as f32;
                        dy.index_axis_mut(Axis(0), bi).assign(&(&dpred * scale));
                    }
                    let grads = net.backward(&dy, &trace);
                    net.step(&grads, lr, effective_phase);
                }
                let n = n_samples.max(1) as f64;
                log.push(InpaintEpochLog {
                    phase: phase_no,
                    epoch,
                    lr,
                    valid: terms_sum[0] / n,
                    hole: terms_sum[1] / n,
                    perceptual: terms_sum[2] / n,
                    style: terms_sum[3] / n,
                    tv: terms_sum[4] / n,
                    total: terms_sum[5] / n,
                });
            }
            if let Some(dir) = &self.checkpoint_dir {
                net.set_trained();
                net.save_checkpoint(
                    &dir.join(format!("inpainter_phase{phase_no}.ckpt")),
                    serde_json::json!({"phase": phase_no}),
                )?;
            }
        }
        net.set_trained();
        Ok((net, log))
    }
}
