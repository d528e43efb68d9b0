//! Hole-mask synthesis.
//!
//! Training corruption masks are unions of randomly placed circles, squares
//! and ellipses, redrawn until the corrupted fraction lands in the target
//! band. Test-time masks come from thresholding PET slices and stamping a
//! fixed-radius disk on each connected component's centroid.
//!
//! Mask convention: 1 = valid pixel, 0 = hole.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Modality, Volume3D};

/// Default SUV cutoff for candidate regions. The conventional FDG-PET
/// malignancy threshold; override via `--pet-threshold` when your tracer or
/// protocol calls for a different one.
pub const DEFAULT_PET_THRESHOLD_SUV: f32 = 2.5;

/// Test-time hole radius in pixels.
pub const DEFAULT_HOLE_RADIUS_PX: u32 = 17;

/// A recorded mask primitive; the hole set of a synthetic mask is exactly
/// the union of its primitives.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum Primitive {
    Circle { cx: f32, cy: f32, r: f32 },
    Square { cx: f32, cy: f32, half: f32, angle: f32 },
    Ellipse { cx: f32, cy: f32, a: f32, b: f32, angle: f32 },
}

impl Primitive {
    fn covers(&self, i: f32, j: f32) -> bool {
        match *self {
            Primitive::Circle { cx, cy, r } => {
                let (di, dj) = (i - cx, j - cy);
                di * di + dj * dj <= r * r
            }
            Primitive::Square { cx, cy, half, angle } => {
                let (di, dj) = (i - cx, j - cy);
                let (s, c) = angle.sin_cos();
                let u = c * di + s * dj;
                let v = -s * di + c * dj;
                u.abs() <= half && v.abs() <= half
            }
            Primitive::Ellipse { cx, cy, a, b, angle } => {
                let (di, dj) = (i - cx, j - cy);
                let (s, c) = angle.sin_cos();
                let u = (c * di + s * dj) / a;
                let v = (-s * di + c * dj) / b;
                u * u + v * v <= 1.0
            }
        }
    }
}

/// Binary 2D hole mask (1 = valid, 0 = hole) plus the primitives that
/// produced it, when synthetic.
#[derive(Debug, Clone)]
pub struct HoleMask {
    pub mask: Array2<u8>,
    pub primitives: Vec<Primitive>,
}

impl HoleMask {
    pub fn all_valid(shape: (usize, usize)) -> Self {
        Self { mask: Array2::ones(shape), primitives: Vec::new() }
    }

    pub fn from_binary(mask: Array2<u8>) -> Result<Self> {
        if let Some(&bad) = mask.iter().find(|&&v| v > 1) {
            return Err(Error::MaskGen(format!("mask value {bad} is not binary")));
        }
        Ok(Self { mask, primitives: Vec::new() })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn hole_count(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 0).count()
    }

    pub fn corruption_fraction(&self) -> f64 {
        self.hole_count() as f64 / self.mask.len() as f64
    }

    /// Float view for the network (1.0 valid, 0.0 hole).
    pub fn to_f32(&self) -> Array2<f32> {
        self.mask.mapv(|v| v as f32)
    }

    /// Export as a 0/255 grayscale PNG for inspection.
    pub fn to_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.mask.dim();
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for i in 0..h {
            for j in 0..w {
                img.put_pixel(j as u32, i as u32, image::Luma([self.mask[(i, j)] * 255]));
            }
        }
        img.save(path)
            .map_err(|e| Error::Other(format!("PNG write failed ({}): {e}", path.display())))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskGenConfig {
    /// A draw is accepted only when its corrupted fraction falls in this
    /// closed band, so the population mean sits inside it too.
    pub target_fraction_range: (f64, f64),
    pub primitive_count_range: (usize, usize),
    /// Per-primitive area as a fraction of the image.
    pub primitive_size_range: (f64, f64),
    /// Redraw budget before giving up on the target band.
    pub max_retries: usize,
}

impl Default for MaskGenConfig {
    fn default() -> Self {
        Self {
            target_fraction_range: (0.25, 0.30),
            primitive_count_range: (5, 12),
            primitive_size_range: (0.01, 0.08),
            max_retries: 200,
        }
    }
}

impl MaskGenConfig {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.target_fraction_range;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::MaskGen(format!("invalid target fraction band ({lo}, {hi})")));
        }
        let (slo, shi) = self.primitive_size_range;
        if !(0.0 < slo && slo <= shi && shi < 1.0) {
            return Err(Error::MaskGen(format!("invalid primitive size range ({slo}, {shi})")));
        }
        if self.primitive_count_range.0 > self.primitive_count_range.1 {
            return Err(Error::MaskGen("primitive count range is inverted".into()));
        }
        Ok(())
    }
}

fn rasterize(primitives: &[Primitive], shape: (usize, usize)) -> Array2<u8> {
    let (h, w) = shape;
    let mut mask = Array2::ones((h, w));
    for prim in primitives {
        // Bounding box keeps rasterization linear in primitive area.
        let (cx, cy, reach) = match *prim {
            Primitive::Circle { cx, cy, r } => (cx, cy, r),
            Primitive::Square { cx, cy, half, .. } => (cx, cy, half * std::f32::consts::SQRT_2),
            Primitive::Ellipse { cx, cy, a, b, .. } => (cx, cy, a.max(b)),
        };
        let i0 = (cx - reach).floor().max(0.0) as usize;
        let i1 = ((cx + reach).ceil() as usize).min(h.saturating_sub(1));
        let j0 = (cy - reach).floor().max(0.0) as usize;
        let j1 = ((cy + reach).ceil() as usize).min(w.saturating_sub(1));
        for i in i0..=i1 {
            for j in j0..=j1 {
                if prim.covers(i as f32, j as f32) {
                    mask[(i, j)] = 0;
                }
            }
        }
    }
    mask
}

/// Draw one irregular corruption mask. Deterministic for a given RNG state.
pub fn random_irregular_mask<R: Rng>(
    shape: (usize, usize),
    config: &MaskGenConfig,
    rng: &mut R,
) -> Result<HoleMask> {
    let (h, w) = shape;
    if h < 32 || w < 32 {
        return Err(Error::MaskGen(format!("mask shape {shape:?} too small, need at least 32x32")));
    }
    config.validate()?;
    if config.primitive_count_range.1 == 0 {
        return Ok(HoleMask::all_valid(shape));
    }

    let area = (h * w) as f64;
    let (band_lo, band_hi) = config.target_fraction_range;
    for _ in 0..config.max_retries {
        let count = rng.gen_range(config.primitive_count_range.0..=config.primitive_count_range.1);
        let mut primitives = Vec::with_capacity(count);
        for _ in 0..count {
            let frac = rng.gen_range(config.primitive_size_range.0..=config.primitive_size_range.1);
            let target_area = (frac * area) as f32;
            let cx = rng.gen_range(0.0..h as f32);
            let cy = rng.gen_range(0.0..w as f32);
            let kind = rng.gen_range(0..3u8);
            let prim = match kind {
                0 => Primitive::Circle {
                    cx,
                    cy,
                    r: (target_area / std::f32::consts::PI).sqrt(),
                },
                1 => Primitive::Square {
                    cx,
                    cy,
                    half: target_area.sqrt() / 2.0,
                    angle: rng.gen_range(0.0..std::f32::consts::FRAC_PI_2),
                },
                _ => {
                    let aspect = rng.gen_range(0.3f32..=1.0);
                    let a = (target_area / (std::f32::consts::PI * aspect)).sqrt();
                    Primitive::Ellipse {
                        cx,
                        cy,
                        a,
                        b: a * aspect,
                        angle: rng.gen_range(0.0..std::f32::consts::PI),
                    }
                }
            };
            primitives.push(prim);
        }
        let mask = rasterize(&primitives, shape);
        let holes = mask.iter().filter(|&&v| v == 0).count();
        let fraction = holes as f64 / area;
        if (band_lo..=band_hi).contains(&fraction) {
            return Ok(HoleMask { mask, primitives });
        }
    }
    Err(Error::MaskGen(format!(
        "target fraction band [{band_lo}, {band_hi}] unreachable after {} draws; \
         primitive sizes/counts are incompatible with the band",
        config.max_retries
    )))
}

/// One connected component of supra-threshold PET pixels in a slice.
#[derive(Debug, Clone)]
pub struct CandidateRegion {
    pub pixels: Vec<(usize, usize)>,
    pub centroid: (f32, f32),
}

/// All candidate regions of one axial slice.
#[derive(Debug, Clone)]
pub struct SliceCandidates {
    pub z_index: usize,
    pub threshold_suv: f32,
    pub regions: Vec<CandidateRegion>,
}

impl SliceCandidates {
    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// 8-connected components of `{SUV >= threshold}` per axial slice, on the
/// raw SUV volume.
pub fn pet_candidate_regions(pet: &Volume3D, threshold_suv: f32) -> Result<Vec<SliceCandidates>> {
    if !(threshold_suv > 0.0) {
        return Err(Error::MaskGen(format!("PET threshold must be positive, got {threshold_suv}")));
    }
    if pet.modality() != Modality::PetSuv {
        return Err(Error::Other(format!(
            "candidate regions are thresholded on raw SUV volumes, got {:?}",
            pet.modality()
        )));
    }
    let (nx, ny, nz) = pet.shape();
    let mut out = Vec::with_capacity(nz);
    for z in 0..nz {
        let plane = pet.data().slice(ndarray::s![.., .., z]);
        let regions = connected_components_2d(&plane, threshold_suv, (nx, ny));
        out.push(SliceCandidates { z_index: z, threshold_suv, regions });
    }
    Ok(out)
}

fn connected_components_2d(
    plane: &ArrayView2<f32>,
    threshold: f32,
    shape: (usize, usize),
) -> Vec<CandidateRegion> {
    let (h, w) = shape;
    let mut visited = Array2::<bool>::default((h, w));
    let mut regions = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if visited[(i, j)] || plane[(i, j)] < threshold {
                continue;
            }
            let mut pixels = Vec::new();
            let mut queue = VecDeque::from([(i, j)]);
            visited[(i, j)] = true;
            while let Some((pi, pj)) = queue.pop_front() {
                pixels.push((pi, pj));
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let (ni, nj) = (pi as i64 + di, pj as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                            continue;
                        }
                        let (ni, nj) = (ni as usize, nj as usize);
                        if !visited[(ni, nj)] && plane[(ni, nj)] >= threshold {
                            visited[(ni, nj)] = true;
                            queue.push_back((ni, nj));
                        }
                    }
                }
            }
            let n = pixels.len() as f32;
            let ci = pixels.iter().map(|p| p.0 as f32).sum::<f32>() / n;
            let cj = pixels.iter().map(|p| p.1 as f32).sum::<f32>() / n;
            regions.push(CandidateRegion { pixels, centroid: (ci, cj) });
        }
    }
    regions
}

/// Stamp a filled disk of `radius_px` on each region centroid (rounded to
/// the nearest pixel). A pixel is a hole iff its center lies within
/// Euclidean distance `radius_px` of that center; disks are clipped at the
/// image border and may overlap.
pub fn candidate_hole_mask(
    regions: &[CandidateRegion],
    shape: (usize, usize),
    radius_px: u32,
) -> HoleMask {
    let (h, w) = shape;
    let mut mask = Array2::ones((h, w));
    let r = radius_px as i64;
    let r2 = r * r;
    for region in regions {
        let ci = region.centroid.0.round() as i64;
        let cj = region.centroid.1.round() as i64;
        for di in -r..=r {
            let i = ci + di;
            if i < 0 || i >= h as i64 {
                continue;
            }
            for dj in -r..=r {
                let j = cj + dj;
                if j < 0 || j >= w as i64 {
                    continue;
                }
                if di * di + dj * dj <= r2 {
                    mask[(i as usize, j as usize)] = 0;
                }
            }
        }
    }
    HoleMask { mask, primitives: Vec::new() }
}
