//! Volume data model: a 3D scalar grid with physical metadata and a
//! modality tag that carries the domain invariants.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti;

/// What a volume's voxel values mean. The tag decides which invariants are
/// enforced at construction and on save.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// CT in Hounsfield units.
    CtHu,
    /// PET standardized uptake values.
    PetSuv,
    /// Signed CT residual in [-1, 1].
    ResidualCt,
    /// Signed PET residual in [-1, 1].
    ResidualPet,
    /// Binary lesion mask, values exactly {0, 1}.
    Label,
    /// Output of a normalization step; no fixed range.
    Normalized,
}

/// An immutable 3D scalar grid with voxel spacing (mm), world origin (mm)
/// and modality. Transformations return new volumes.
#[derive(Debug, Clone)]
pub struct Volume3D {
    data: Array3<f32>,
    spacing: [f32; 3],
    origin: [f32; 3],
    modality: Modality,
}

impl Volume3D {
    pub fn new(
        data: Array3<f32>,
        spacing: [f32; 3],
        origin: [f32; 3],
        modality: Modality,
    ) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invariant(format!(
                "voxel spacing must be strictly positive, got {spacing:?}"
            )));
        }
        match modality {
            Modality::Label => {
                if let Some(bad) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Invariant(format!(
                        "label volume contains value {bad}, expected only 0 or 1"
                    )));
                }
            }
            Modality::ResidualCt | Modality::ResidualPet => {
                for ((x, y, z), &v) in data.indexed_iter() {
                    if !(-1.0..=1.0).contains(&v) {
                        return Err(Error::ResidualOutOfRange { value: v, x, y, z });
                    }
                }
            }
            _ => {}
        }
        Ok(Self { data, spacing, origin, modality })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// Voxel volume in mm^3.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().map(|&s| s as f64).product()
    }

    /// New volume on the same grid (spacing/origin copied) with fresh data.
    pub fn with_data(&self, data: Array3<f32>, modality: Modality) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return Err(Error::GridMismatch(format!(
                "replacement data has shape {:?}, grid is {:?}",
                data.dim(),
                self.data.dim()
            )));
        }
        Self::new(data, self.spacing, self.origin, modality)
    }

    /// True when shapes and spacings match (the pipeline's co-registration
    /// assumption).
    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.data.dim() == other.data.dim() && self.spacing == other.spacing
    }

    pub fn ensure_same_grid(&self, other: &Volume3D, what: &str) -> Result<()> {
        if !self.same_grid(other) {
            return Err(Error::GridMismatch(format!(
                "{what}: {:?} @ {:?} mm vs {:?} @ {:?} mm",
                self.data.dim(),
                self.spacing,
                other.data.dim(),
                other.spacing
            )));
        }
        Ok(())
    }
}

/// Load a single-channel NIfTI volume, normalizing axis orientation so the
/// third array axis is axial. Values are taken as-is from the file.
pub fn load_volume(path: &Path, modality: Modality) -> Result<Volume3D> {
    let raw = nifti::load(path)?;
    Volume3D::new(raw.data, raw.spacing, raw.origin, modality)
}

/// Save as little-endian float32 NIfTI-1 (`.nii` or `.nii.gz`). Round-trips
/// losslessly through [`load_volume`].
pub fn save_volume(vol: &Volume3D, path: &Path) -> Result<()> {
    // Cheap re-validation so an invalid volume never reaches disk.
    let checked = Volume3D::new(vol.data.clone(), vol.spacing, vol.origin, vol.modality)?;
    nifti::save(&checked.data, checked.spacing, checked.origin, path)
}
