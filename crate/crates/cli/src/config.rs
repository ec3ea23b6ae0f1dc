//! Experiment configuration: JSON documents with a schema version. CLI flags
//! override individual fields after loading.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use glioma25d::cohort::{CaseLabels, CodelStatus, Grade, IdhStatus, PhantomSpec, Task};
use glioma25d::error::{CoreError, Result};
use glioma25d::net::{FusionMode, ModelConfig};
use glioma25d::train::Schedule;
use glioma25d::volume::Plane;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// The view an experiment evaluates: one plane, or the three-plane ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Axial,
    Coronal,
    Sagittal,
    #[serde(rename = "2.5D")]
    MultiView,
}

impl View {
    /// Planes whose models this view needs.
    pub fn planes(self) -> &'static [Plane] {
        match self {
            View::Axial => &[Plane::Axial],
            View::Coronal => &[Plane::Coronal],
            View::Sagittal => &[Plane::Sagittal],
            View::MultiView => &[Plane::Axial, Plane::Coronal, Plane::Sagittal],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Axial => "axial",
            View::Coronal => "coronal",
            View::Sagittal => "sagittal",
            View::MultiView => "2.5D",
        }
    }
}

impl std::str::FromStr for View {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(View::Axial),
            "coronal" => Ok(View::Coronal),
            "sagittal" => Ok(View::Sagittal),
            "2.5D" | "2.5d" | "multiview" => Ok(View::MultiView),
            other => Err(CoreError::Config(format!("unknown view '{other}'"))),
        }
    }
}

/// Cohort-generation config: phantom knobs plus the target label mix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub n_cases: usize,
    pub seed: u64,
    pub spec: PhantomSpec,
    /// (labels, fraction) pairs; fractions must sum to 1.
    pub fractions: Vec<(CaseLabels, f64)>,
}

impl GenerateConfig {
    /// A 50/50 IDH mix with codeletion nested in the mutant arm, grades
    /// spread II–IV: a usable default study population.
    pub fn default_for(output_dir: &Path, n_cases: usize, seed: u64) -> Self {
        let l = |idh, codel, grade| CaseLabels { idh, codel, grade };
        GenerateConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            output_dir: output_dir.to_path_buf(),
            n_cases,
            seed,
            spec: PhantomSpec::default(),
            fractions: vec![
                (l(IdhStatus::Mutant, CodelStatus::Codeleted, Grade::II), 0.15),
                (l(IdhStatus::Mutant, CodelStatus::Codeleted, Grade::III), 0.10),
                (l(IdhStatus::Mutant, CodelStatus::NonCodeleted, Grade::II), 0.15),
                (l(IdhStatus::Mutant, CodelStatus::NonCodeleted, Grade::III), 0.10),
                (l(IdhStatus::Wildtype, CodelStatus::NonCodeleted, Grade::III), 0.15),
                (l(IdhStatus::Wildtype, CodelStatus::NonCodeleted, Grade::IV), 0.35),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version)?;
        if self.n_cases == 0 {
            return Err(CoreError::Config("generate.n_cases: must be >= 1".into()));
        }
        let total: f64 = self.fractions.iter().map(|(_, f)| f).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config(format!(
                "generate.fractions: sum to {total}, expected 1"
            )));
        }
        self.spec.validate()
    }
}

/// One experiment: a task, a fusion scheme, a view, and everything needed to
/// train and evaluate it reproducibly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: Task,
    pub fusion: FusionMode,
    pub view: View,
    /// Preprocessed cohort directory (output of `preprocess`).
    pub cohort_dir: PathBuf,
    /// Run directory; all artifacts land here.
    pub output_dir: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: Schedule,
    /// Train / internal / external_a / external_b case fractions.
    pub split_fractions: [f64; 4],
    /// Random-search budget; 0 skips hyperparameter search.
    pub search_budget: usize,
    /// Cross-validation folds for the search.
    pub cv_folds: usize,
    pub bootstrap_resamples: usize,
    /// Score assigned to BG (no-detection) cases when ranking.
    pub bg_score: f64,
}

impl ExperimentConfig {
    pub fn default_for(task: Task, cohort_dir: &Path, output_dir: &Path, seed: u64) -> Self {
        let n_channels = task.modalities().len();
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            task,
            fusion: FusionMode::None,
            view: View::MultiView,
            cohort_dir: cohort_dir.to_path_buf(),
            output_dir: output_dir.to_path_buf(),
            seed,
            model: ModelConfig::desk(n_channels),
            schedule: Schedule::default(),
            split_fractions: [0.8, 0.2, 0.0, 0.0],
            search_budget: 0,
            cv_folds: 5,
            bootstrap_resamples: 1000,
            bg_score: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version)?;
        if self.model.input_channels != self.task.modalities().len() {
            return Err(CoreError::Config(format!(
                "model.input_channels: {} but task {} has {} modalities",
                self.model.input_channels,
                self.task.name(),
                self.task.modalities().len()
            )));
        }
        let total: f64 = self.split_fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config(format!(
                "split_fractions: sum to {total}, expected 1"
            )));
        }
        if self.split_fractions[0] <= 0.0 {
            return Err(CoreError::Config("split_fractions: train fraction must be > 0".into()));
        }
        if self.search_budget > 0 && self.cv_folds < 2 {
            return Err(CoreError::Config("cv_folds: must be >= 2 when searching".into()));
        }
        if self.bootstrap_resamples == 0 {
            return Err(CoreError::Config("bootstrap_resamples: must be >= 1".into()));
        }
        self.model.validate()?;
        self.schedule.validate()
    }
}

fn check_schema(version: u32) -> Result<()> {
    if version != CONFIG_SCHEMA_VERSION {
        return Err(CoreError::Config(format!(
            "schema_version: {version} unsupported (expected {CONFIG_SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| {
        CoreError::Config(format!("{}: {e}", path.display()))
    })
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CoreError::io(parent.display().to_string(), e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CoreError::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default_for(
            Task::Idh,
            &dir.path().join("cohort"),
            &dir.path().join("run"),
            7,
        );
        cfg.validate().unwrap();
        let path = dir.path().join("config.json");
        save_json(&path, &cfg).unwrap();
        let back: ExperimentConfig = load_json(&path).unwrap();
        back.validate().unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.view, View::MultiView);
    }

    #[test]
    fn schema_version_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg =
            ExperimentConfig::default_for(Task::Idh, dir.path(), dir.path(), 0);
        cfg.schema_version = 99;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("schema_version"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn channel_mismatch_is_field_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg =
            ExperimentConfig::default_for(Task::Codel, dir.path(), dir.path(), 0);
        cfg.model.input_channels = 3; // 1p/19q uses two modalities
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("input_channels"));
    }

    #[test]
    fn generate_fractions_must_sum_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = GenerateConfig::default_for(dir.path(), 10, 0);
        cfg.validate().unwrap();
        cfg.fractions[0].1 += 0.2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn view_parsing() {
        assert_eq!("2.5D".parse::<View>().unwrap(), View::MultiView);
        assert_eq!("axial".parse::<View>().unwrap(), View::Axial);
        assert!("diagonal".parse::<View>().is_err());
        assert_eq!(View::MultiView.planes().len(), 3);
    }
}
