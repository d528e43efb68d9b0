//! Dataset manifest: pairs CT/PET/label files by case id and assigns
//! cross-validation folds, stratified by tumor class.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{load_volume, Modality};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TumorClass {
    Negative,
    LungCancer,
    Lymphoma,
    Melanoma,
}

impl TumorClass {
    pub const ALL: [TumorClass; 4] =
        [TumorClass::Negative, TumorClass::LungCancer, TumorClass::Lymphoma, TumorClass::Melanoma];

    pub fn label(&self) -> &'static str {
        match self {
            TumorClass::Negative => "Negative",
            TumorClass::LungCancer => "Lung Cancer",
            TumorClass::Lymphoma => "Lymphoma",
            TumorClass::Melanoma => "Melanoma",
        }
    }

    pub fn is_positive(&self) -> bool {
        !matches!(self, TumorClass::Negative)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub ct_path: PathBuf,
    pub pet_path: PathBuf,
    pub label_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_ct_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_pet_path: Option<PathBuf>,
    pub tumor_class: TumorClass,
    pub fold: u32,
}

/// Sidecar written next to each case's volumes; carries what cannot be
/// inferred from the images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMeta {
    pub tumor_class: TumorClass,
}

fn strip_role(name: &str) -> Option<(&str, &str)> {
    let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))?;
    for role in ["ct", "pet", "label"] {
        if let Some(id) = stem.strip_suffix(role).and_then(|s| s.strip_suffix('_')) {
            return Some((id, role));
        }
    }
    None
}

/// Scan `root_dir` for `<case>_{ct,pet,label}.nii[.gz]` triples and assign
/// folds by stratified round-robin over tumor class. The class comes from a
/// `<case>_meta.json` sidecar when present; a case without one must have an
/// empty label volume and is recorded as negative.
pub fn build_manifest(root_dir: &Path, n_folds: u32) -> Result<Vec<CaseRecord>> {
    if n_folds == 0 {
        return Err(Error::Other("n_folds must be at least 1".into()));
    }
    let mut roles: BTreeMap<String, BTreeMap<&'static str, PathBuf>> = BTreeMap::new();
    let entries = std::fs::read_dir(root_dir).map_err(|e| Error::io(root_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root_dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some((id, role)) = strip_role(name) {
            let role_key = match role {
                "ct" => "ct",
                "pet" => "pet",
                _ => "label",
            };
            let slot = roles.entry(id.to_string()).or_default();
            if slot.insert(role_key, entry.path()).is_some() {
                return Err(Error::DuplicateCase(id.to_string()));
            }
        }
    }
    if roles.is_empty() {
        return Err(Error::Other(format!("no case volumes found under {}", root_dir.display())));
    }

    let mut cases = Vec::new();
    for (id, mut slot) in roles {
        let missing: Vec<&str> =
            ["ct", "pet", "label"].iter().copied().filter(|r| !slot.contains_key(r)).collect();
        if !missing.is_empty() {
            return Err(Error::UnpairedCase { case_id: id, missing: missing.join(", ") });
        }
        let ct_path = slot.remove("ct").unwrap();
        let pet_path = slot.remove("pet").unwrap();
        let label_path = slot.remove("label").unwrap();

        let ct = load_volume(&ct_path, Modality::CtHu)?;
        let pet = load_volume(&pet_path, Modality::PetSuv)?;
        let label = load_volume(&label_path, Modality::Label)?;
        ct.ensure_same_grid(&pet, &format!("case '{id}' CT vs PET"))?;
        ct.ensure_same_grid(&label, &format!("case '{id}' CT vs label"))?;

        let label_empty = label.data().iter().all(|&v| v == 0.0);
        let meta_path = root_dir.join(format!("{id}_meta.json"));
        let tumor_class = if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            let meta: CaseMeta = serde_json::from_str(&text)
                .map_err(|e| Error::Other(format!("bad meta file {}: {e}", meta_path.display())))?;
            meta.tumor_class
        } else if label_empty {
            TumorClass::Negative
        } else {
            return Err(Error::Other(format!(
                "case '{id}' has lesions but no {id}_meta.json declaring its tumor class"
            )));
        };
        if tumor_class == TumorClass::Negative && !label_empty {
            return Err(Error::Invariant(format!(
                "case '{id}' is declared negative but its label volume is not empty"
            )));
        }

        cases.push(CaseRecord {
            case_id: id,
            ct_path,
            pet_path,
            label_path,
            residual_ct_path: None,
            residual_pet_path: None,
            tumor_class,
            fold: 0,
        });
    }

    assign_folds(&mut cases, n_folds);
    Ok(cases)
}

/// Stratified round-robin: within each class, sorted case ids get folds in
/// sequence; the starting fold rotates between classes to balance totals.
fn assign_folds(cases: &mut [CaseRecord], n_folds: u32) {
    let mut offset = 0u32;
    for class in TumorClass::ALL {
        let mut ids: Vec<usize> = cases
            .iter()
            .enumerate()
            .filter(|(_, c)| c.tumor_class == class)
            .map(|(i, _)| i)
            .collect();
        ids.sort_by(|&a, &b| cases[a].case_id.cmp(&cases[b].case_id));
        for (k, &i) in ids.iter().enumerate() {
            cases[i].fold = (offset + k as u32) % n_folds;
        }
        offset = (offset + ids.len() as u32) % n_folds;
    }
}

pub fn save_manifest(cases: &[CaseRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let text = serde_json::to_string_pretty(cases)
        .map_err(|e| Error::Other(format!("manifest serialization failed: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Vec<CaseRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Other(format!("manifest parse failed ({}): {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{save_volume, Volume3D};
    use ndarray::Array3;
    use std::collections::HashMap;

    fn write_case(dir: &Path, id: &str, class: Option<TumorClass>, lesion: bool) {
        let ct = Volume3D::new(Array3::zeros((16, 16, 16)), [1.0; 3], [0.0; 3], Modality::CtHu).unwrap();
        let pet = Volume3D::new(Array3::zeros((16, 16, 16)), [1.0; 3], [0.0; 3], Modality::PetSuv).unwrap();
        let mut label_data = Array3::zeros((16, 16, 16));
        if lesion {
            label_data[(8, 8, 8)] = 1.0;
        }
        let label = Volume3D::new(label_data, [1.0; 3], [0.0; 3], Modality::Label).unwrap();
        save_volume(&ct, &dir.join(format!("{id}_ct.nii.gz"))).unwrap();
        save_volume(&pet, &dir.join(format!("{id}_pet.nii.gz"))).unwrap();
        save_volume(&label, &dir.join(format!("{id}_label.nii.gz"))).unwrap();
        if let Some(class) = class {
            let meta = CaseMeta { tumor_class: class };
            std::fs::write(
                dir.join(format!("{id}_meta.json")),
                serde_json::to_string(&meta).unwrap(),
            )
            .unwrap();
        }
    }

    #[test]
    fn ten_cases_five_folds_two_each() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..10 {
            write_case(dir.path(), &format!("case{i:02}"), Some(TumorClass::Lymphoma), true);
        }
        let manifest = build_manifest(dir.path(), 5).unwrap();
        let mut counts = HashMap::new();
        for c in &manifest {
            *counts.entry(c.fold).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 5);
        assert!(counts.values().all(|&n| n == 2));
    }

    #[test]
    fn minority_class_lands_in_distinct_folds() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..8 {
            write_case(dir.path(), &format!("ly{i}"), Some(TumorClass::Lymphoma), true);
        }
        for i in 0..2 {
            write_case(dir.path(), &format!("me{i}"), Some(TumorClass::Melanoma), true);
        }
        let manifest = build_manifest(dir.path(), 5).unwrap();
        let melanoma_folds: Vec<u32> = manifest
            .iter()
            .filter(|c| c.tumor_class == TumorClass::Melanoma)
            .map(|c| c.fold)
            .collect();
        assert_eq!(melanoma_folds.len(), 2);
        assert_ne!(melanoma_folds[0], melanoma_folds[1]);
        // Per-class fold sizes differ by at most one.
        for class in [TumorClass::Lymphoma, TumorClass::Melanoma] {
            let mut counts = [0usize; 5];
            for c in manifest.iter().filter(|c| c.tumor_class == class) {
                counts[c.fold as usize] += 1;
            }
            let max = counts.iter().max().unwrap();
            let min = counts.iter().min().unwrap();
            assert!(max - min <= 1, "class {class:?} fold counts {counts:?}");
        }
    }

    #[test]
    fn unpaired_ct_reports_case_id() {
        let dir = tempfile::tempdir().unwrap();
        write_case(dir.path(), "ok", None, false);
        let ct = Volume3D::new(Array3::zeros((16, 16, 16)), [1.0; 3], [0.0; 3], Modality::CtHu).unwrap();
        save_volume(&ct, &dir.path().join("lonely_ct.nii.gz")).unwrap();
        match build_manifest(dir.path(), 2) {
            Err(Error::UnpairedCase { case_id, missing }) => {
                assert_eq!(case_id, "lonely");
                assert!(missing.contains("pet") && missing.contains("label"));
            }
            other => panic!("expected unpaired-case error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_role_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_case(dir.path(), "dup", None, false);
        let ct = Volume3D::new(Array3::zeros((16, 16, 16)), [1.0; 3], [0.0; 3], Modality::CtHu).unwrap();
        save_volume(&ct, &dir.path().join("dup_ct.nii")).unwrap();
        assert!(matches!(build_manifest(dir.path(), 2), Err(Error::DuplicateCase(id)) if id == "dup"));
    }

    #[test]
    fn negative_without_meta_is_inferred() {
        let dir = tempfile::tempdir().unwrap();
        write_case(dir.path(), "neg", None, false);
        let manifest = build_manifest(dir.path(), 1).unwrap();
        assert_eq!(manifest[0].tumor_class, TumorClass::Negative);
    }

    #[test]
    fn lesions_without_meta_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_case(dir.path(), "mystery", None, true);
        assert!(build_manifest(dir.path(), 1).is_err());
    }

    #[test]
    fn manifest_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        write_case(dir.path(), "a", Some(TumorClass::LungCancer), true);
        write_case(dir.path(), "b", None, false);
        let manifest = build_manifest(dir.path(), 2).unwrap();
        let path = dir.path().join("manifest.json");
        save_manifest(&manifest, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.len(), manifest.len());
        assert_eq!(back[0].case_id, manifest[0].case_id);
        assert_eq!(back[0].tumor_class, manifest[0].tumor_class);
    }
}
