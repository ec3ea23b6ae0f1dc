//! Cohort manifest: a JSON document with one record per case and relative
//! paths to the NIfTI volumes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nifti;

use super::{CaseMeta, CaseRecord, Modality};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCase {
    #[serde(flatten)]
    pub meta: CaseMeta,
    /// Relative path per modality.
    pub volumes: BTreeMap<Modality, String>,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub cases: Vec<ManifestCase>,
}

/// Incremental cohort writer so large cohorts never sit in memory whole.
pub struct CohortWriter {
    dir: PathBuf,
    cases: Vec<ManifestCase>,
}

impl CohortWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.display().to_string(), e))?;
        Ok(CohortWriter { dir: dir.to_path_buf(), cases: Vec::new() })
    }

    pub fn add_case(&mut self, case: &CaseRecord) -> Result<()> {
        let case_dir = self.dir.join(&case.meta.case_id);
        fs::create_dir_all(&case_dir)
            .map_err(|e| CoreError::io(case_dir.display().to_string(), e))?;
        let mut volumes = BTreeMap::new();
        let mut spacing = [1.0; 3];
        for (&m, vol) in &case.modalities {
            let rel = format!("{}/{}.nii", case.meta.case_id, m.name());
            nifti::write_volume(vol, &self.dir.join(&rel))?;
            volumes.insert(m, rel);
            spacing = vol.spacing;
        }
        let mask_rel = format!("{}/mask.nii", case.meta.case_id);
        nifti::write_mask(&case.mask, spacing, &self.dir.join(&mask_rel))?;
        self.cases.push(ManifestCase {
            meta: case.meta.clone(),
            volumes,
            mask: mask_rel,
        });
        Ok(())
    }

    /// Write `manifest.json` and return the manifest.
    pub fn finish(self) -> Result<Manifest> {
        let manifest = Manifest { schema_version: SCHEMA_VERSION, cases: self.cases };
        let path = self.dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, json).map_err(|e| CoreError::io(path.display().to_string(), e))?;
        Ok(manifest)
    }
}

/// Write a full in-memory cohort (volumes as NIfTI, metadata as JSON).
pub fn write_cohort(cases: &[CaseRecord], dir: &Path) -> Result<Manifest> {
    let mut writer = CohortWriter::new(dir)?;
    for case in cases {
        writer.add_case(case)?;
    }
    writer.finish()
}

/// Read and validate a manifest. Every referenced volume file must exist;
/// missing files are reported by path.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text =
        fs::read_to_string(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        CoreError::Data(format!("{}: invalid manifest: {e}", path.display()))
    })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(CoreError::Data(format!(
            "{}: unsupported schema version {}",
            path.display(),
            manifest.schema_version
        )));
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    for case in &manifest.cases {
        for rel in case.volumes.values().chain(std::iter::once(&case.mask)) {
            let f = dir.join(rel);
            if !f.is_file() {
                return Err(CoreError::Data(format!(
                    "manifest references missing file: {}",
                    f.display()
                )));
            }
        }
    }
    Ok(manifest)
}

/// Load one case's volumes and mask from disk.
pub fn load_case(manifest_dir: &Path, entry: &ManifestCase) -> Result<CaseRecord> {
    let mut modalities = BTreeMap::new();
    for (&m, rel) in &entry.volumes {
        modalities.insert(m, nifti::read_volume(&manifest_dir.join(rel))?);
    }
    let mask = nifti::read_mask(&manifest_dir.join(&entry.mask))?;
    Ok(CaseRecord { meta: entry.meta.clone(), modalities, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{
        generate_cohort, CaseLabels, CodelStatus, Grade, IdhStatus, PhantomSpec,
    };

    fn small_cohort() -> Vec<CaseRecord> {
        let spec = PhantomSpec {
            volume_shape: [32, 32, 32],
            radius_range: (4.0, 6.0),
            ..Default::default()
        };
        let fractions = vec![
            (
                CaseLabels {
                    idh: IdhStatus::Mutant,
                    codel: CodelStatus::Codeleted,
                    grade: Grade::II,
                },
                0.5,
            ),
            (
                CaseLabels {
                    idh: IdhStatus::Wildtype,
                    codel: CodelStatus::NonCodeleted,
                    grade: Grade::IV,
                },
                0.5,
            ),
        ];
        generate_cohort(&spec, &fractions, 4, 3).unwrap()
    }

    #[test]
    fn manifest_roundtrip_preserves_metadata() {
        let cases = small_cohort();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_cohort(&cases, dir.path()).unwrap();
        let back = read_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(manifest, back);
        for (case, entry) in cases.iter().zip(&back.cases) {
            assert_eq!(case.meta, entry.meta);
            let loaded = load_case(dir.path(), entry).unwrap();
            assert_eq!(loaded.mask, case.mask);
        }
    }

    #[test]
    fn missing_volume_file_is_reported_by_path() {
        let cases = small_cohort();
        let dir = tempfile::tempdir().unwrap();
        write_cohort(&cases, dir.path()).unwrap();
        let victim = dir.path().join("case0000/t2.nii");
        std::fs::remove_file(&victim).unwrap();
        let err = read_manifest(&dir.path().join("manifest.json")).unwrap_err();
        assert!(err.to_string().contains("t2.nii"), "{err}");
    }

    #[test]
    fn unknown_label_token_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let bad = r#"{"schema_version":1,"cases":[{"case_id":"c0","age_years":50.0,
            "sex":"F","grade":"ii","idh":"somewhat-mutated","codel":"codeleted",
            "os_months":null,"event":null,"volumes":{},"mask":"c0/mask.nii"}]}"#;
        std::fs::write(&path, bad).unwrap();
        let err = read_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("invalid manifest"), "{err}");
    }
}
