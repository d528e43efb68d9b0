//! Test-time prior estimation: normalize, slice, threshold PET, inpaint
//! candidate regions, and restack signed residuals into volumes.
//!
//! Slices without candidate regions skip the network entirely and get
//! exact-zero residual planes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::array_hash;
use crate::error::{Error, Result};
use crate::inpaint::{inpaint_slice, InpaintNetwork};
use crate::manifest::CaseRecord;
use crate::maskgen::{candidate_hole_mask, pet_candidate_regions, HoleMask};
use crate::preprocess::{clip_scale_normalize, ClipScaleParams};
use crate::slicer::{split_residual_channels, stack_to_volume, volume_to_rgb_slices};
use crate::volume::{load_volume, save_volume, Modality, Volume3D};

/// Signed residual volumes aligned to the source grid, values in [-1, 1].
#[derive(Debug, Clone)]
pub struct PriorPair {
    pub residual_ct: Volume3D,
    pub residual_pet: Volume3D,
}

/// Residuals for one case plus how many slices actually ran the network.
pub fn compute_prior(
    ct: &Volume3D,
    pet: &Volume3D,
    net: &InpaintNetwork,
    threshold_suv: f32,
    radius_px: u32,
    case_id: &str,
) -> Result<(PriorPair, usize)> {
    if ct.modality() != Modality::CtHu || pet.modality() != Modality::PetSuv {
        return Err(Error::Other(format!(
            "prior estimation expects raw CT (HU) and PET (SUV) volumes, got {:?}/{:?}",
            ct.modality(),
            pet.modality()
        )));
    }
    ct.ensure_same_grid(pet, &format!("case '{case_id}' CT vs PET"))?;
    if !net.is_trained() {
        return Err(Error::UntrainedNetwork);
    }

    let ct_norm = clip_scale_normalize(ct, &ClipScaleParams::ct())?;
    let pet_norm = clip_scale_normalize(pet, &ClipScaleParams::pet())?;
    let stack = volume_to_rgb_slices(&ct_norm, &pet_norm, case_id)?;
    let candidates = pet_candidate_regions(pet, threshold_suv)?;
    let (nx, ny, _) = ct.shape();

    let planes: Vec<Result<(Array2<f32>, Array2<f32>, bool)>> = stack
        .slices
        .par_iter()
        .zip(candidates.par_iter())
        .map(|(slice, cand)| {
            if cand.is_empty() {
                return Ok((Array2::zeros((nx, ny)), Array2::zeros((nx, ny)), false));
            }
            let holes: HoleMask = candidate_hole_mask(&cand.regions, (nx, ny), radius_px);
            let inpainted = inpaint_slice(net, slice, &holes)?;
            let (res_ct, res_pet) = split_residual_channels(slice, &inpainted)?;
            Ok((res_ct, res_pet, true))
        })
        .collect();

    let mut ct_planes = Vec::with_capacity(planes.len());
    let mut pet_planes = Vec::with_capacity(planes.len());
    let mut inpainted_slices = 0usize;
    for plane in planes {
        let (rc, rp, ran) = plane?;
        ct_planes.push(rc);
        pet_planes.push(rp);
        if ran {
            inpainted_slices += 1;
        }
    }

    let residual_ct = stack_to_volume(&ct_planes, ct, Modality::ResidualCt)?;
    let residual_pet = stack_to_volume(&pet_planes, ct, Modality::ResidualPet)?;
    Ok((PriorPair { residual_ct, residual_pet }, inpainted_slices))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PriorCacheEntry {
    res_ct: PathBuf,
    res_pet: PathBuf,
    content_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PriorCache {
    checkpoint_hash: String,
    threshold_suv: f32,
    radius_px: u32,
    cases: BTreeMap<String, PriorCacheEntry>,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct PriorSummary {
    pub cases_computed: usize,
    pub cases_skipped: usize,
    pub slices_inpainted: usize,
}

fn pair_hash(pair: &PriorPair) -> String {
    let ct = array_hash(&pair.residual_ct.data().view());
    let pet = array_hash(&pair.residual_pet.data().view());
    format!("{ct}:{pet}")
}

/// Compute and cache residual volumes for every manifest case.
///
/// Idempotent: cases whose cached volumes still match their recorded content
/// hash are skipped without any network forward pass. A cache built under a
/// different checkpoint hash, threshold or radius is rejected unless `force`
/// is set.
pub fn precompute_priors(
    manifest: &mut [CaseRecord],
    out_dir: &Path,
    net: &InpaintNetwork,
    checkpoint_hash: &str,
    threshold_suv: f32,
    radius_px: u32,
    force: bool,
) -> Result<PriorSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cache_path = out_dir.join("priors_cache.json");
    let mut cache: PriorCache = if cache_path.exists() && !force {
        let text = std::fs::read_to_string(&cache_path).map_err(|e| Error::io(&cache_path, e))?;
        let cache: PriorCache = serde_json::from_str(&text)
            .map_err(|e| Error::Other(format!("prior cache parse failed: {e}")))?;
        if cache.checkpoint_hash != checkpoint_hash {
            return Err(Error::StaleCache {
                path: cache_path,
                reason: format!(
                    "cache was built from checkpoint {}, current is {}",
                    &cache.checkpoint_hash[..12.min(cache.checkpoint_hash.len())],
                    &checkpoint_hash[..12.min(checkpoint_hash.len())]
                ),
            });
        }
        if cache.threshold_suv != threshold_suv || cache.radius_px != radius_px {
            return Err(Error::StaleCache {
                path: cache_path,
                reason: format!(
                    "cache used threshold {} / radius {}, requested {} / {}",
                    cache.threshold_suv, cache.radius_px, threshold_suv, radius_px
                ),
            });
        }
        cache
    } else {
        PriorCache {
            checkpoint_hash: checkpoint_hash.to_string(),
            threshold_suv,
            radius_px,
            cases: BTreeMap::new(),
        }
    };

    let mut summary = PriorSummary::default();
    for case in manifest.iter_mut() {
        let res_ct_path = out_dir.join(format!("{}_res_ct.nii.gz", case.case_id));
        let res_pet_path = out_dir.join(format!("{}_res_pet.nii.gz", case.case_id));

        if !force {
            if let Some(entry) = cache.cases.get(&case.case_id) {
                if entry.res_ct.exists() && entry.res_pet.exists() {
                    let pair = PriorPair {
                        residual_ct: load_volume(&entry.res_ct, Modality::ResidualCt)?,
                        residual_pet: load_volume(&entry.res_pet, Modality::ResidualPet)?,
                    };
                    if pair_hash(&pair) == entry.content_hash {
                        case.residual_ct_path = Some(entry.res_ct.clone());
                        case.residual_pet_path = Some(entry.res_pet.clone());
                        summary.cases_skipped += 1;
                        continue;
                    }
                }
            }
        }

        let ct = load_volume(&case.ct_path, Modality::CtHu)?;
        let pet = load_volume(&case.pet_path, Modality::PetSuv)?;
        let (pair, n_slices) =
            compute_prior(&ct, &pet, net, threshold_suv, radius_px, &case.case_id)?;
        save_volume(&pair.residual_ct, &res_ct_path)?;
        save_volume(&pair.residual_pet, &res_pet_path)?;
        cache.cases.insert(
            case.case_id.clone(),
            PriorCacheEntry {
                res_ct: res_ct_path.clone(),
                res_pet: res_pet_path.clone(),
                content_hash: pair_hash(&pair),
            },
        );
        case.residual_ct_path = Some(res_ct_path);
        case.residual_pet_path = Some(res_pet_path);
        summary.cases_computed += 1;
        summary.slices_inpainted += n_slices;
    }

    let text = serde_json::to_string_pretty(&cache)
        .map_err(|e| Error::Other(format!("prior cache encode failed: {e}")))?;
    std::fs::write(&cache_path, text).map_err(|e| Error::io(&cache_path, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::checkpoint_hash;
    use crate::inpaint::InpaintNetConfig;
    use crate::manifest::{build_manifest, CaseMeta, TumorClass};
    use crate::maskgen::DEFAULT_PET_THRESHOLD_SUV;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use ndarray::Array3;

    fn test_net() -> InpaintNetwork {
        let mut net =
            InpaintNetwork::build(InpaintNetConfig { levels: 2, base_width: 8, seed: 3 }).unwrap();
        net.set_trained();
        net
    }

    #[test]
    fn all_zero_pet_gives_zero_priors() {
        let ct = Volume3D::new(Array3::from_elem((32, 32, 8), 40.0), [1.0; 3], [0.0; 3], Modality::CtHu).unwrap();
        let pet = Volume3D::new(Array3::zeros((32, 32, 8)), [1.0; 3], [0.0; 3], Modality::PetSuv).unwrap();
        let net = test_net();
        let (pair, n) = compute_prior(&ct, &pet, &net, DEFAULT_PET_THRESHOLD_SUV, 17, "z").unwrap();
        assert_eq!(n, 0);
        assert_eq!(pair.residual_ct.data().sum(), 0.0);
        assert_eq!(pair.residual_pet.data().sum(), 0.0);
    }

    #[test]
    fn residual_support_confined_to_hole_disks() {
        let spec = PhantomSpec { grid_size: (32, 32, 16), n_lesions: 1, seed: 21, ..Default::default() };
        let (ct, pet, _) = generate_phantom(&spec).unwrap();
        let net = test_net();
        let (pair, n) = compute_prior(&ct, &pet, &net, 2.5, 6, "p").unwrap();
        assert!(n > 0, "the lesion should trigger inpainting somewhere");
        let candidates = pet_candidate_regions(&pet, 2.5).unwrap();
        for (z, cand) in candidates.iter().enumerate() {
            let holes = candidate_hole_mask(&cand.regions, (32, 32), 6);
            let hole_f = holes.to_f32();
            for i in 0..32 {
                for j in 0..32 {
                    if hole_f[(i, j)] == 1.0 {
                        assert_eq!(
                            pair.residual_ct.data()[(i, j, z)],
                            0.0,
                            "CT residual outside hole at ({i},{j},{z})"
                        );
                        assert_eq!(pair.residual_pet.data()[(i, j, z)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn untrained_network_rejected() {
        let net = InpaintNetwork::build(InpaintNetConfig { levels: 2, base_width: 8, seed: 0 }).unwrap();
        let ct = Volume3D::new(Array3::zeros((32, 32, 4)), [1.0; 3], [0.0; 3], Modality::CtHu).unwrap();
        let pet = Volume3D::new(Array3::zeros((32, 32, 4)), [1.0; 3], [0.0; 3], Modality::PetSuv).unwrap();
        assert!(matches!(
            compute_prior(&ct, &pet, &net, 2.5, 17, "x"),
            Err(Error::UntrainedNetwork)
        ));
    }

    #[test]
    fn grid_mismatch_rejected() {
        let net = test_net();
        let ct = Volume3D::new(Array3::zeros((32, 32, 4)), [1.0; 3], [0.0; 3], Modality::CtHu).unwrap();
        let pet = Volume3D::new(Array3::zeros((32, 32, 5)), [1.0; 3], [0.0; 3], Modality::PetSuv).unwrap();
        assert!(matches!(compute_prior(&ct, &pet, &net, 2.5, 17, "x"), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn determinism_same_inputs_same_hashes() {
        let spec = PhantomSpec { grid_size: (32, 32, 16), seed: 5, ..Default::default() };
        let (ct, pet, _) = generate_phantom(&spec).unwrap();
        let net = test_net();
        let (a, _) = compute_prior(&ct, &pet, &net, 2.5, 6, "d").unwrap();
        let (b, _) = compute_prior(&ct, &pet, &net, 2.5, 6, "d").unwrap();
        assert_eq!(pair_hash(&a), pair_hash(&b));
    }

    fn write_phantom_cohort(dir: &Path, n: usize) -> Vec<CaseRecord> {
        for i in 0..n {
            let spec = PhantomSpec { grid_size: (32, 32, 16), seed: 40 + i as u64, ..Default::default() };
            let (ct, pet, label) = generate_phantom(&spec).unwrap();
            let id = format!("case{i}");
            save_volume(&ct, &dir.join(format!("{id}_ct.nii.gz"))).unwrap();
            save_volume(&pet, &dir.join(format!("{id}_pet.nii.gz"))).unwrap();
            save_volume(&label, &dir.join(format!("{id}_label.nii.gz"))).unwrap();
            std::fs::write(
                dir.join(format!("{id}_meta.json")),
                serde_json::to_string(&CaseMeta { tumor_class: TumorClass::Lymphoma }).unwrap(),
            )
            .unwrap();
        }
        build_manifest(dir, 2).unwrap()
    }

    #[test]
    fn precompute_is_idempotent_and_counts_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = write_phantom_cohort(dir.path(), 3);
        let net = test_net();
        let ckpt = dir.path().join("net.ckpt");
        net.save_checkpoint(&ckpt, serde_json::Value::Null).unwrap();
        let hash = checkpoint_hash(&ckpt).unwrap();

        let out = dir.path().join("priors");
        let s1 = precompute_priors(&mut manifest, &out, &net, &hash, 2.5, 6, false).unwrap();
        assert_eq!(s1.cases_computed, 3);
        assert_eq!(s1.cases_skipped, 0);
        let files: Vec<_> = std::fs::read_dir(&out)
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".nii.gz"))
            .collect();
        assert_eq!(files.len(), 6, "expected 6 residual volumes, got {files:?}");
        assert!(manifest.iter().all(|c| c.residual_ct_path.is_some()));

        // Second run: everything cached, zero forward passes.
        let s2 = precompute_priors(&mut manifest, &out, &net, &hash, 2.5, 6, false).unwrap();
        assert_eq!(s2.cases_computed, 0);
        assert_eq!(s2.cases_skipped, 3);
        assert_eq!(s2.slices_inpainted, 0);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = write_phantom_cohort(dir.path(), 1);
        let net = test_net();
        let out = dir.path().join("priors");
        precompute_priors(&mut manifest, &out, &net, "hash-a", 2.5, 6, false).unwrap();
        let err = precompute_priors(&mut manifest, &out, &net, "hash-b", 2.5, 6, false);
        assert!(matches!(err, Err(Error::StaleCache { .. })));
        // Different threshold is stale too.
        let err = precompute_priors(&mut manifest, &out, &net, "hash-a", 3.0, 6, false);
        assert!(matches!(err, Err(Error::StaleCache { .. })));
        // Force rebuilds.
        let s = precompute_priors(&mut manifest, &out, &net, "hash-b", 2.5, 6, true).unwrap();
        assert_eq!(s.cases_computed, 1);
    }
}
