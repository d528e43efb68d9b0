//! Synthetic PET-CT phantom generator.
//!
//! Builds a torso-like volume (air background, soft-tissue body, bone shell,
//! ellipsoidal pseudo-organs) with optional hyperintense pseudo-lesions, so
//! the whole pipeline can be exercised without clinical data. Deterministic
//! for a fixed seed.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Modality, Volume3D};

pub const AIR_HU: f32 = -1000.0;
const SOFT_TISSUE_HU: f32 = 40.0;
const BONE_HU: f32 = 780.0;
const BODY_SUV: f32 = 0.6;
const BONE_SUV: f32 = 0.3;
const ORGAN_SUV_MAX: f32 = 2.0;
const HOT_ORGAN_SUV: (f32, f32) = (3.0, 4.4);
const CT_NOISE_HU: f32 = 5.0;
const PET_NOISE_SUV: f32 = 0.05;
/// CT contrast of a lesion over its host tissue.
const LESION_HU_BOOST: f32 = 60.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid_size: (usize, usize, usize),
    pub spacing: [f32; 3],
    pub n_organs: usize,
    pub n_lesions: usize,
    /// Per-lesion SUV is drawn uniformly from this closed range.
    pub lesion_suv_range: (f32, f32),
    /// Extra pseudo-organs with SUV above the usual candidate threshold but
    /// below any lesion: healthy tissue that a PET threshold will flag.
    pub n_hot_organs: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid_size: (48, 48, 48),
            spacing: [2.0, 2.0, 3.0],
            n_organs: 3,
            n_lesions: 2,
            lesion_suv_range: (5.0, 10.0),
            n_hot_organs: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f32; 3],
    semi: [f32; 3],
}

impl Ellipsoid {
    /// Normalized squared radius; <= 1 inside.
    fn level(&self, p: [f32; 3]) -> f32 {
        let mut acc = 0.0;
        for i in 0..3 {
            let d = (p[i] - self.center[i]) / self.semi[i];
            acc += d * d;
        }
        acc
    }

    fn contains(&self, p: [f32; 3]) -> bool {
        self.level(p) <= 1.0
    }

    fn fits_in_grid(&self, grid: (usize, usize, usize)) -> bool {
        let n = [grid.0 as f32, grid.1 as f32, grid.2 as f32];
        (0..3).all(|i| self.center[i] - self.semi[i] >= 0.0 && self.center[i] + self.semi[i] <= n[i] - 1.0)
    }
}

struct Organ {
    shape: Ellipsoid,
    hu: f32,
    suv: f32,
}

/// Generate a deterministic (CT, PET, label) phantom triple.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume3D, Volume3D, Volume3D)> {
    let (nx, ny, nz) = spec.grid_size;
    if nx < 16 || ny < 16 || nz < 16 {
        return Err(Error::Phantom(format!(
            "grid {:?} too small, need at least 16 voxels per axis",
            spec.grid_size
        )));
    }
    if spec.n_lesions > 0 && spec.n_organs == 0 {
        return Err(Error::Phantom("lesions require at least one organ to host them".into()));
    }
    let (suv_lo, suv_hi) = spec.lesion_suv_range;
    if !(suv_lo <= suv_hi) {
        return Err(Error::Phantom(format!("invalid lesion SUV range ({suv_lo}, {suv_hi})")));
    }
    let hottest_background = if spec.n_hot_organs > 0 { HOT_ORGAN_SUV.1 } else { ORGAN_SUV_MAX };
    if spec.n_lesions > 0 && suv_lo <= hottest_background + PET_NOISE_SUV {
        return Err(Error::Phantom(format!(
            "lesion SUV lower bound {suv_lo} must exceed the brightest background ({hottest_background} + noise)"
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let n = [nx as f32, ny as f32, nz as f32];

    let body = Ellipsoid {
        center: [(n[0] - 1.0) / 2.0, (n[1] - 1.0) / 2.0, (n[2] - 1.0) / 2.0],
        semi: [0.42 * n[0], 0.42 * n[1], 0.46 * n[2]],
    };
    // Bone is a shell of the body ellipsoid; organs must stay inside it.
    let bone_inner = 0.78f32;

    let mut organs = Vec::with_capacity(spec.n_organs + spec.n_hot_organs);
    for k in 0..spec.n_organs + spec.n_hot_organs {
        let hot = k >= spec.n_organs;
        let organ = place_organ(&mut rng, &body, n, bone_inner)?;
        let hu = rng.gen_range(0.0..=100.0);
        let suv = if hot {
            rng.gen_range(HOT_ORGAN_SUV.0..=HOT_ORGAN_SUV.1)
        } else {
            rng.gen_range(0.8..=ORGAN_SUV_MAX)
        };
        organs.push(Organ { shape: organ, hu, suv });
    }

    let mut lesions = Vec::with_capacity(spec.n_lesions);
    for _ in 0..spec.n_lesions {
        let host = &organs[rng.gen_range(0..organs.len())].shape;
        let lesion = place_lesion(&mut rng, host, &body, bone_inner, n, spec.grid_size)?;
        let suv = rng.gen_range(suv_lo..=suv_hi);
        lesions.push((lesion, suv));
    }

    let mut ct = Array3::from_elem((nx, ny, nz), AIR_HU);
    let mut pet = Array3::zeros((nx, ny, nz));
    let mut label = Array3::zeros((nx, ny, nz));

    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = [x as f32, y as f32, z as f32];
                let lv = body.level(p);
                if lv > 1.0 {
                    continue;
                }
                let (mut hu, mut suv) = if lv >= bone_inner {
                    (BONE_HU, BONE_SUV)
                } else {
                    (SOFT_TISSUE_HU, BODY_SUV)
                };
                for organ in &organs {
                    if organ.shape.contains(p) {
                        hu = organ.hu;
                        suv = organ.suv;
                    }
                }
                let mut in_lesion = false;
                for (lesion, lesion_suv) in &lesions {
                    if lesion.contains(p) {
                        hu = (hu + LESION_HU_BOOST).min(800.0);
                        suv = *lesion_suv;
                        in_lesion = true;
                    }
                }
                // Noise stays out of lesions so the label/SUV contract is exact,
                // and out of air so the CT background is exactly -1000.
                if !in_lesion {
                    hu += rng.gen_range(-CT_NOISE_HU..=CT_NOISE_HU);
                    suv = (suv + rng.gen_range(-PET_NOISE_SUV..=PET_NOISE_SUV)).max(0.0);
                } else {
                    label[(x, y, z)] = 1.0;
                }
                ct[(x, y, z)] = hu.clamp(-1000.0, 800.0);
                pet[(x, y, z)] = suv;
            }
        }
    }

    let ct = Volume3D::new(ct, spec.spacing, [0.0; 3], Modality::CtHu)?;
    let pet = Volume3D::new(pet, spec.spacing, [0.0; 3], Modality::PetSuv)?;
    let label = Volume3D::new(label, spec.spacing, [0.0; 3], Modality::Label)?;
    Ok((ct, pet, label))
}

fn place_organ(rng: &mut ChaCha20Rng, body: &Ellipsoid, n: [f32; 3], bone_inner: f32) -> Result<Ellipsoid> {
    for _ in 0..200 {
        let semi = [
            rng.gen_range(0.08..=0.16) * n[0],
            rng.gen_range(0.08..=0.16) * n[1],
            rng.gen_range(0.08..=0.16) * n[2],
        ];
        let center = [
            body.center[0] + rng.gen_range(-0.45..=0.45) * body.semi[0],
            body.center[1] + rng.gen_range(-0.45..=0.45) * body.semi[1],
            body.center[2] + rng.gen_range(-0.45..=0.45) * body.semi[2],
        ];
        let organ = Ellipsoid { center, semi };
        // Keep the whole organ inside the soft interior of the bone shell.
        let reach: f32 = (0..3).map(|i| semi[i] / body.semi[i]).fold(0.0, f32::max);
        if body.level(center).sqrt() + reach <= bone_inner.sqrt() {
            return Ok(organ);
        }
    }
    Err(Error::Phantom("could not place an organ inside the body".into()))
}

/// Lesions are centered well inside their host organ and must stay within
/// the soft interior of the body (and the grid). They may poke out of the
/// host itself; the label is the exact lesion ellipsoid either way.
fn place_lesion(
    rng: &mut ChaCha20Rng,
    host: &Ellipsoid,
    body: &Ellipsoid,
    bone_inner: f32,
    n: [f32; 3],
    grid: (usize, usize, usize),
) -> Result<Ellipsoid> {
    for _ in 0..500 {
        let semi = [
            (rng.gen_range(0.04..=0.09) * n[0]).max(1.3),
            (rng.gen_range(0.04..=0.09) * n[1]).max(1.3),
            (rng.gen_range(0.04..=0.09) * n[2]).max(1.3),
        ];
        let center = [
            host.center[0] + rng.gen_range(-0.5..=0.5) * host.semi[0],
            host.center[1] + rng.gen_range(-0.5..=0.5) * host.semi[1],
            host.center[2] + rng.gen_range(-0.5..=0.5) * host.semi[2],
        ];
        let lesion = Ellipsoid { center, semi };
        if host.level(center) > 0.7 {
            continue;
        }
        let body_reach: f32 = (0..3).map(|i| semi[i] / body.semi[i]).fold(0.0, f32::max);
        let in_soft_tissue = body.level(center).sqrt() + body_reach <= bone_inner.sqrt();
        if in_soft_tissue && lesion.fits_in_grid(grid) {
            return Ok(lesion);
        }
    }
    Err(Error::Phantom("lesion ellipsoid cannot fit inside the grid/host organ".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_lesions_means_empty_label() {
        let spec = PhantomSpec { n_lesions: 0, ..Default::default() };
        let (_, _, label) = generate_phantom(&spec).unwrap();
        assert_eq!(label.data().sum(), 0.0);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = PhantomSpec { seed: 42, ..Default::default() };
        let (ct1, pet1, l1) = generate_phantom(&spec).unwrap();
        let (ct2, pet2, l2) = generate_phantom(&spec).unwrap();
        assert_eq!(ct1.data(), ct2.data());
        assert_eq!(pet1.data(), pet2.data());
        assert_eq!(l1.data(), l2.data());
    }

    #[test]
    fn different_seed_differs() {
        let (a, ..) = generate_phantom(&PhantomSpec { seed: 1, ..Default::default() }).unwrap();
        let (b, ..) = generate_phantom(&PhantomSpec { seed: 2, ..Default::default() }).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn lesion_voxels_sit_above_suv_floor() {
        let spec = PhantomSpec { n_lesions: 3, lesion_suv_range: (5.0, 10.0), seed: 9, ..Default::default() };
        let (_, pet, label) = generate_phantom(&spec).unwrap();
        let mut lesion_voxels = 0;
        for (idx, &l) in label.data().indexed_iter() {
            if l == 1.0 {
                lesion_voxels += 1;
                assert!(pet.data()[idx] >= 5.0, "lesion voxel {idx:?} has SUV {}", pet.data()[idx]);
            }
        }
        assert!(lesion_voxels > 0, "phantom has no lesion voxels at all");
    }

    #[test]
    fn ct_range_and_air_background() {
        let (ct, ..) = generate_phantom(&PhantomSpec::default()).unwrap();
        for &v in ct.data().iter() {
            assert!((-1000.0..=800.0).contains(&v));
        }
        assert_eq!(ct.data()[(0, 0, 0)], AIR_HU);
    }

    #[test]
    fn tiny_grid_rejected() {
        let spec = PhantomSpec { grid_size: (8, 48, 48), ..Default::default() };
        assert!(matches!(generate_phantom(&spec), Err(Error::Phantom(_))));
    }

    #[test]
    fn hot_organ_exceeds_candidate_threshold() {
        let spec = PhantomSpec { n_hot_organs: 1, n_lesions: 0, seed: 3, ..Default::default() };
        let (_, pet, _) = generate_phantom(&spec).unwrap();
        let max = pet.data().iter().cloned().fold(f32::MIN, f32::max);
        assert!(max > 2.5, "hot organ should exceed SUV 2.5, max was {max}");
        assert!(max <= HOT_ORGAN_SUV.1 + PET_NOISE_SUV);
    }
}
