//! Intensity normalization.
//!
//! Two regimes, matching the two pipeline stages: a fixed-window clip to
//! [0, 1] for the 2D inpainting stage, and a per-volume percentile clip
//! followed by z-scoring for the 3D segmentation stage. Residual volumes are
//! passed through untouched. All arithmetic is f32.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Modality, Volume3D};

/// Fixed clip window for the [0, 1] normalization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClipScaleParams {
    pub lower: f32,
    pub upper: f32,
}

impl ClipScaleParams {
    /// CT window: -1000 HU (air) to 800 HU (dense bone).
    pub fn ct() -> Self {
        Self { lower: -1000.0, upper: 800.0 }
    }

    /// PET window: 0 to 12 SUV.
    pub fn pet() -> Self {
        Self { lower: 0.0, upper: 12.0 }
    }

    pub fn for_modality(modality: Modality) -> Result<Self> {
        match modality {
            Modality::CtHu => Ok(Self::ct()),
            Modality::PetSuv => Ok(Self::pet()),
            other => Err(Error::Other(format!("no clip window defined for {other:?} volumes"))),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lower < self.upper) {
            return Err(Error::Invariant(format!(
                "clip window lower bound {} must be below upper bound {}",
                self.lower, self.upper
            )));
        }
        Ok(())
    }
}

/// Map values through `clamp((x - lower) / (upper - lower), 0, 1)`.
pub fn clip_scale_normalize(vol: &Volume3D, params: &ClipScaleParams) -> Result<Volume3D> {
    params.validate()?;
    if !matches!(vol.modality(), Modality::CtHu | Modality::PetSuv) {
        return Err(Error::Other(format!(
            "clip-scale normalization expects CT or PET input, got {:?}",
            vol.modality()
        )));
    }
    let span = params.upper - params.lower;
    let data = vol.data().mapv(|x| ((x - params.lower) / span).clamp(0.0, 1.0));
    vol.with_data(data, Modality::Normalized)
}

/// Scalar version of [`clip_scale_normalize`], used by tests and by the
/// slice pipeline.
pub fn clip_scale_value(x: f32, params: &ClipScaleParams) -> f32 {
    ((x - params.lower) / (params.upper - params.lower)).clamp(0.0, 1.0)
}

/// Fitted statistics for percentile-clipped z-scoring.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ZScoreParams {
    /// Percentile ranks used for clipping (defaults 0.5 / 99.5).
    pub p_low: f32,
    pub p_high: f32,
    /// Fitted percentile values.
    pub p_low_value: f32,
    pub p_high_value: f32,
    /// Mean and standard deviation of the clipped volume.
    pub mu: f32,
    pub sigma: f32,
}

pub const DEFAULT_P_LOW: f32 = 0.5;
pub const DEFAULT_P_HIGH: f32 = 99.5;

/// Percentile by linear interpolation between order statistics:
/// the value at fractional position `q/100 * (n-1)` of the sorted data.
pub fn percentile(sorted: &[f32], q: f32) -> f32 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (q as f64 / 100.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    let frac = (pos - lo as f64) as f32;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Fit percentile-clip + z-score statistics over all voxels of one volume.
pub fn fit_zscore_params(vol: &Volume3D) -> Result<ZScoreParams> {
    fit_zscore_params_with(vol, DEFAULT_P_LOW, DEFAULT_P_HIGH)
}

pub fn fit_zscore_params_with(vol: &Volume3D, p_low: f32, p_high: f32) -> Result<ZScoreParams> {
    if !(0.0..=100.0).contains(&p_low) || !(0.0..=100.0).contains(&p_high) || p_low > p_high {
        return Err(Error::Other(format!("invalid percentile range [{p_low}, {p_high}]")));
    }
    let mut sorted: Vec<f32> = vol.data().iter().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted.first() == sorted.last() {
        return Err(Error::DegenerateInput(
            "volume is constant; z-score statistics are undefined".into(),
        ));
    }
    let p_low_value = percentile(&sorted, p_low);
    let p_high_value = percentile(&sorted, p_high);

    let n = sorted.len() as f64;
    let mut sum = 0.0f64;
    for &v in &sorted {
        sum += v.clamp(p_low_value, p_high_value) as f64;
    }
    let mu = sum / n;
    let mut var = 0.0f64;
    for &v in &sorted {
        let d = v.clamp(p_low_value, p_high_value) as f64 - mu;
        var += d * d;
    }
    let sigma = (var / n).sqrt();
    if sigma <= 0.0 {
        return Err(Error::DegenerateInput(
            "volume is constant after percentile clipping; sigma would be zero".into(),
        ));
    }
    Ok(ZScoreParams {
        p_low,
        p_high,
        p_low_value,
        p_high_value,
        mu: mu as f32,
        sigma: sigma as f32,
    })
}

/// Apply `(clamp(x, p_low_value, p_high_value) - mu) / sigma`.
pub fn zscore_normalize(vol: &Volume3D, params: &ZScoreParams) -> Result<Volume3D> {
    if !(params.sigma > 0.0) {
        return Err(Error::DegenerateInput(format!("sigma must be positive, got {}", params.sigma)));
    }
    if params.p_low_value > params.p_high_value {
        return Err(Error::Invariant(format!(
            "percentile values out of order: {} > {}",
            params.p_low_value, params.p_high_value
        )));
    }
    let data: Array3<f32> = vol
        .data()
        .mapv(|x| (x.clamp(params.p_low_value, params.p_high_value) - params.mu) / params.sigma);
    vol.with_data(data, Modality::Normalized)
}

/// Residual volumes enter the segmenter untouched; this just re-asserts the
/// [-1, 1] range (reporting the offending voxel) and returns a copy.
pub fn passthrough_residual(vol: &Volume3D) -> Result<Volume3D> {
    match vol.modality() {
        Modality::ResidualCt | Modality::ResidualPet => {}
        other => {
            return Err(Error::Other(format!(
                "residual pass-through expects a residual volume, got {other:?}"
            )))
        }
    }
    for ((x, y, z), &v) in vol.data().indexed_iter() {
        if !(-1.0..=1.0).contains(&v) {
            return Err(Error::ResidualOutOfRange { value: v, x, y, z });
        }
    }
    Ok(vol.clone())
}
