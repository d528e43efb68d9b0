//! Assembly of the 4-channel segmenter input: z-scored PET and CT plus the
//! raw residual pair, in the fixed order (PET, CT, residual-PET,
//! residual-CT).

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::manifest::CaseRecord;
use crate::preprocess::{fit_zscore_params, passthrough_residual, zscore_normalize, ZScoreParams};
use crate::volume::{load_volume, Modality, Volume3D};

/// Channel order is fixed; the per-channel modality tags double as an
/// ordering assertion for the residual channels.
#[derive(Debug, Clone)]
pub struct SegInput {
    channels: [Volume3D; 4],
}

impl SegInput {
    pub fn new(channels: [Volume3D; 4]) -> Result<Self> {
        let expected = [
            (Modality::Normalized, "z-scored PET"),
            (Modality::Normalized, "z-scored CT"),
            (Modality::ResidualPet, "PET residual"),
            (Modality::ResidualCt, "CT residual"),
        ];
        for (i, ((want, desc), vol)) in expected.iter().zip(channels.iter()).enumerate() {
            if vol.modality() != *want {
                return Err(Error::Invariant(format!(
                    "segmenter channel {i} must be the {desc} ({want:?}), got {:?}",
                    vol.modality()
                )));
            }
        }
        for i in 1..4 {
            channels[0].ensure_same_grid(&channels[i], &format!("channel 0 vs channel {i}"))?;
        }
        Ok(Self { channels })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.channels[0].shape()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.channels[0].spacing()
    }

    pub fn channel(&self, i: usize) -> &Volume3D {
        &self.channels[i]
    }

    /// Dense (4, X, Y, Z) tensor for the network.
    pub fn to_tensor(&self) -> Array4<f32> {
        let (nx, ny, nz) = self.shape();
        let mut out = Array4::zeros((4, nx, ny, nz));
        for (c, vol) in self.channels.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), c).assign(vol.data());
        }
        out
    }
}

/// Per-case preprocessing record, persisted as JSON for reproducibility.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SegPreprocessRecord {
    pub case_id: String,
    pub pet: ZScoreParams,
    pub ct: ZScoreParams,
}

/// Load a case with precomputed residuals and build the 4-channel input.
pub fn build_seg_input(case: &CaseRecord) -> Result<(SegInput, SegPreprocessRecord)> {
    let (Some(res_pet_path), Some(res_ct_path)) =
        (&case.residual_pet_path, &case.residual_ct_path)
    else {
        return Err(Error::MissingResiduals { case_id: case.case_id.clone() });
    };
    if !res_pet_path.exists() || !res_ct_path.exists() {
        return Err(Error::MissingResiduals { case_id: case.case_id.clone() });
    }

    let pet = load_volume(&case.pet_path, Modality::PetSuv)?;
    let ct = load_volume(&case.ct_path, Modality::CtHu)?;
    let res_pet = load_volume(res_pet_path, Modality::ResidualPet)?;
    let res_ct = load_volume(res_ct_path, Modality::ResidualCt)?;

    let pet_params = fit_zscore_params(&pet)?;
    let ct_params = fit_zscore_params(&ct)?;
    let pet_n = zscore_normalize(&pet, &pet_params)?;
    let ct_n = zscore_normalize(&ct, &ct_params)?;
    let res_pet = passthrough_residual(&res_pet)?;
    let res_ct = passthrough_residual(&res_ct)?;

    let input = SegInput::new([pet_n, ct_n, res_pet, res_ct])?;
    let record =
        SegPreprocessRecord { case_id: case.case_id.clone(), pet: pet_params, ct: ct_params };
    Ok((input, record))
}
