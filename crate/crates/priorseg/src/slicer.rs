//! 3D volume <-> 2D RGB slice conversion for the inpainting stage.
//!
//! Axial slices are (x, y) planes along array axis 2. Each slice is stacked
//! channel-first as [CT, PET, CT]: CT fills the red and blue channels, PET
//! the green one.

use std::path::Path;

use ndarray::{s, Array2, Array3};

use crate::error::{Error, Result};
use crate::volume::{Modality, Volume3D};

/// One axial slice in the 3-channel layout, values in [0, 1].
/// `pixels` has shape (3, nx, ny).
#[derive(Debug, Clone)]
pub struct RgbSlice {
    pub pixels: Array3<f32>,
    pub z_index: usize,
    pub case_id: String,
}

impl RgbSlice {
    pub fn new(pixels: Array3<f32>, z_index: usize, case_id: impl Into<String>) -> Result<Self> {
        let (c, _, _) = pixels.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("slice needs 3 channels, got {c}")));
        }
        if let Some(&bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invariant(format!("slice value {bad} outside [0, 1]")));
        }
        if pixels.slice(s![0, .., ..]) != pixels.slice(s![2, .., ..]) {
            return Err(Error::Invariant("channels 0 and 2 must both hold the CT plane".into()));
        }
        Ok(Self { pixels, z_index, case_id: case_id.into() })
    }

    /// Constructor for inpainted slices: the network's red and blue channels
    /// need not be equal anymore, so only shape and range are enforced.
    pub fn from_network_output(
        pixels: Array3<f32>,
        z_index: usize,
        case_id: impl Into<String>,
    ) -> Result<Self> {
        let (c, _, _) = pixels.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("slice needs 3 channels, got {c}")));
        }
        if let Some(&bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invariant(format!("slice value {bad} outside [0, 1]")));
        }
        Ok(Self { pixels, z_index, case_id: case_id.into() })
    }

    pub fn plane_shape(&self) -> (usize, usize) {
        let (_, h, w) = self.pixels.dim();
        (h, w)
    }

    pub fn channel(&self, c: usize) -> Array2<f32> {
        self.pixels.slice(s![c, .., ..]).to_owned()
    }
}

/// The full axial stack of one case, ordered by z.
#[derive(Debug, Clone)]
pub struct SliceStack {
    pub slices: Vec<RgbSlice>,
    pub grid_shape: (usize, usize, usize),
    pub spacing: [f32; 3],
}

/// Slice two co-registered normalized volumes into the [CT, PET, CT] stack.
pub fn volume_to_rgb_slices(ct_norm: &Volume3D, pet_norm: &Volume3D, case_id: &str) -> Result<SliceStack> {
    for (vol, name) in [(ct_norm, "CT"), (pet_norm, "PET")] {
        if vol.modality() != Modality::Normalized {
            return Err(Error::Other(format!(
                "{name} volume must be normalized before slicing, got {:?}",
                vol.modality()
            )));
        }
    }
    ct_norm.ensure_same_grid(pet_norm, "slicing CT vs PET")?;
    let (nx, ny, nz) = ct_norm.shape();
    let mut slices = Vec::with_capacity(nz);
    for z in 0..nz {
        let ct_plane = ct_norm.data().slice(s![.., .., z]);
        let pet_plane = pet_norm.data().slice(s![.., .., z]);
        let mut pixels = Array3::zeros((3, nx, ny));
        pixels.slice_mut(s![0, .., ..]).assign(&ct_plane);
        pixels.slice_mut(s![1, .., ..]).assign(&pet_plane);
        pixels.slice_mut(s![2, .., ..]).assign(&ct_plane);
        slices.push(RgbSlice::new(pixels, z, case_id)?);
    }
    Ok(SliceStack { slices, grid_shape: (nx, ny, nz), spacing: ct_norm.spacing() })
}

/// Per-channel difference `original - inpainted`; channel 0 yields the CT
/// residual plane, channel 1 the PET residual plane. Outputs lie in [-1, 1]
/// because both inputs are in [0, 1].
pub fn split_residual_channels(
    original: &RgbSlice,
    inpainted: &RgbSlice,
) -> Result<(Array2<f32>, Array2<f32>)> {
    if original.pixels.dim() != inpainted.pixels.dim() {
        return Err(Error::ShapeMismatch(format!(
            "residual inputs differ: {:?} vs {:?}",
            original.pixels.dim(),
            inpainted.pixels.dim()
        )));
    }
    if original.z_index != inpainted.z_index {
        return Err(Error::ShapeMismatch(format!(
            "residual inputs come from different slices: z={} vs z={}",
            original.z_index, inpainted.z_index
        )));
    }
    let diff = &original.pixels - &inpainted.pixels;
    let residual_ct = diff.slice(s![0, .., ..]).to_owned();
    let residual_pet = diff.slice(s![1, .., ..]).to_owned();
    Ok((residual_ct, residual_pet))
}

/// Reassemble ordered 2D planes into a volume on the template's grid.
pub fn stack_to_volume(
    planes: &[Array2<f32>],
    template: &Volume3D,
    modality: Modality,
) -> Result<Volume3D> {
    let (nx, ny, nz) = template.shape();
    if planes.len() != nz {
        return Err(Error::ShapeMismatch(format!(
            "{} planes cannot fill a template with nz = {nz}",
            planes.len()
        )));
    }
    let mut data = Array3::zeros((nx, ny, nz));
    for (z, plane) in planes.iter().enumerate() {
        if plane.dim() != (nx, ny) {
            return Err(Error::ShapeMismatch(format!(
                "plane {z} has shape {:?}, template plane is ({nx}, {ny})",
                plane.dim()
            )));
        }
        data.slice_mut(s![.., .., z]).assign(plane);
    }
    template.with_data(data, modality)
}

/// Debug dump of a slice as an 8-bit PNG (values x255, rounded).
pub fn slice_to_png(slice: &RgbSlice, path: &Path) -> Result<()> {
    let (h, w) = slice.plane_shape();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (slice.pixels[(0, y, x)] * 255.0).round() as u8,
                (slice.pixels[(1, y, x)] * 255.0).round() as u8,
                (slice.pixels[(2, y, x)] * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::Other(format!("PNG write failed ({}): {e}", path.display())))
}
