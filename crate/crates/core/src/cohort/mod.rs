//! Synthetic phantom cohorts with plantable phenotype/label correlations.

mod manifest;
mod phantom;

pub use manifest::{load_case, read_manifest, write_cohort, CohortWriter, Manifest, ManifestCase};
pub use phantom::generate_case;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::par;
use crate::rng::derive_seed;
use crate::volume::{MultiClassMask, Volume};

/// MR modality of a scan. The channel order fed to the network is fixed:
/// T1c, T2, then FLAIR when present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1c,
    T2,
    Flair,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::T1c => "t1c",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Classification task. `class1` is the positive class throughout:
/// IDH-mutant for the IDH task, codeleted for the 1p/19q task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "IDH")]
    Idh,
    #[serde(rename = "1p19q")]
    Codel,
}

impl Task {
    pub fn modalities(self) -> &'static [Modality] {
        match self {
            Task::Idh => &[Modality::T1c, Modality::T2, Modality::Flair],
            Task::Codel => &[Modality::T1c, Modality::T2],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Idh => "IDH",
            Task::Codel => "1p19q",
        }
    }

    /// Binary class index (0 or 1) of a case under this task, if known.
    pub fn class_of(self, meta: &CaseMeta) -> Option<usize> {
        match self {
            Task::Idh => match meta.idh {
                IdhStatus::Mutant => Some(1),
                IdhStatus::Wildtype => Some(0),
                IdhStatus::Unknown => None,
            },
            Task::Codel => match meta.codel {
                CodelStatus::Codeleted => Some(1),
                CodelStatus::NonCodeleted => Some(0),
                CodelStatus::Unknown => None,
            },
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "IDH" | "idh" => Ok(Task::Idh),
            "1p19q" | "codel" => Ok(Task::Codel),
            other => Err(CoreError::Config(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grade {
    II,
    III,
    IV,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdhStatus {
    #[serde(rename = "mut")]
    Mutant,
    #[serde(rename = "wt")]
    Wildtype,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodelStatus {
    Codeleted,
    #[serde(rename = "non-codeleted")]
    NonCodeleted,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Event {
    Observed,
    Censored,
}

/// Ground-truth labels requested for one generated case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaseLabels {
    pub idh: IdhStatus,
    pub codel: CodelStatus,
    pub grade: Grade,
}

/// Scalar metadata of one patient case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub case_id: String,
    pub age_years: f64,
    pub sex: Sex,
    pub grade: Grade,
    pub idh: IdhStatus,
    pub codel: CodelStatus,
    pub os_months: Option<f64>,
    pub event: Option<Event>,
}

/// One patient: per-modality volumes, segmentation mask, and metadata.
#[derive(Debug, Clone)]
pub struct CaseRecord {
    pub meta: CaseMeta,
    pub modalities: BTreeMap<Modality, Volume>,
    pub mask: MultiClassMask,
}

/// Per-class generator parameters keyed by IDH status.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ByIdh<T> {
    pub mutant: T,
    pub wildtype: T,
}

impl<T: Copy> ByIdh<T> {
    pub fn get(&self, s: IdhStatus) -> T {
        match s {
            IdhStatus::Wildtype | IdhStatus::Unknown => self.wildtype,
            IdhStatus::Mutant => self.mutant,
        }
    }
}

/// Per-class generator parameters keyed by 1p/19q status.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ByCodel<T> {
    pub codeleted: T,
    pub non_codeleted: T,
}

impl<T: Copy> ByCodel<T> {
    pub fn get(&self, s: CodelStatus) -> T {
        match s {
            CodelStatus::NonCodeleted | CodelStatus::Unknown => self.non_codeleted,
            CodelStatus::Codeleted => self.codeleted,
        }
    }
}

/// All knobs of the phantom generator. Every planted effect size is a free
/// parameter; none is a measured clinical quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub volume_shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Overall tumor radius range in voxels (min, max), min < max.
    pub radius_range: (f64, f64),
    /// Enhancing-rim thickness as a fraction of the tumor radius.
    pub rim_thickness_fraction: ByIdh<f64>,
    /// Edema outer radius as a multiple of the rim radius (1.0 = no edema).
    pub edema_extent: f64,
    /// Spherical-harmonic perturbation amplitude of the rim boundary.
    pub rim_irregularity: ByIdh<f64>,
    /// Per-case spread of the irregularity amplitude (truncated at 0).
    pub rim_irregularity_sd: f64,
    /// T1c rim brightness.
    pub rim_intensity: ByIdh<f64>,
    /// Uniform per-case jitter half-width on the rim intensity.
    pub rim_intensity_jitter: f64,
    /// Age-at-diagnosis distribution (years).
    pub age_mean: ByIdh<f64>,
    pub age_sd: ByIdh<f64>,
    /// Probability that the tumor is seeded in the frontal atlas region.
    pub frontal_probability: ByCodel<f64>,
    /// Amplitude of low-frequency multiplicative texture inside the tumor.
    pub texture_heterogeneity: ByCodel<f64>,
    /// Median overall survival (months) of the exponential OS draw.
    pub os_median_months: ByIdh<f64>,
    /// Probability that a case's follow-up is censored.
    pub censoring_probability: f64,
    /// Additive Gaussian intensity noise.
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            volume_shape: [64, 64, 64],
            spacing_mm: [2.0, 2.0, 2.0],
            radius_range: (7.0, 11.0),
            rim_thickness_fraction: ByIdh { mutant: 0.18, wildtype: 0.32 },
            edema_extent: 1.35,
            rim_irregularity: ByIdh { mutant: 0.06, wildtype: 0.22 },
            rim_irregularity_sd: 0.07,
            rim_intensity: ByIdh { mutant: 2.0, wildtype: 2.35 },
            rim_intensity_jitter: 0.25,
            age_mean: ByIdh { mutant: 42.0, wildtype: 62.0 },
            age_sd: ByIdh { mutant: 10.0, wildtype: 10.0 },
            frontal_probability: ByCodel { codeleted: 0.9, non_codeleted: 0.15 },
            texture_heterogeneity: ByCodel { codeleted: 0.35, non_codeleted: 0.08 },
            os_median_months: ByIdh { mutant: 47.6, wildtype: 16.94 },
            censoring_probability: 0.2,
            noise_sigma: 0.08,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && lo < hi) {
            return Err(CoreError::Config(format!(
                "radius range ({lo}, {hi}) must satisfy 0 < min < max"
            )));
        }
        let min_axis = *self.volume_shape.iter().min().unwrap() as f64;
        // outermost extent with irregularity and edema, plus 2-voxel margin
        let max_a = self.rim_irregularity.mutant.max(self.rim_irregularity.wildtype)
            + 3.0 * self.rim_irregularity_sd;
        let reach = hi * (1.0 + max_a) * self.edema_extent + 2.0;
        if reach >= 0.46 * min_axis {
            return Err(CoreError::Config(format!(
                "radius range infeasible for volume shape {:?}: max reach {reach:.1} voxels",
                self.volume_shape
            )));
        }
        for p in [
            self.frontal_probability.codeleted,
            self.frontal_probability.non_codeleted,
            self.censoring_probability,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::Config(format!("probability {p} outside [0,1]")));
            }
        }
        if self.edema_extent < 1.0 {
            return Err(CoreError::Config("edema extent must be >= 1.0".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.volume_shape[0], self.volume_shape[1], self.volume_shape[2])
    }
}

/// Target composition of a generated cohort: one (labels, fraction) pair per
/// label combination; fractions must sum to 1.
pub type ClassFractions = Vec<(CaseLabels, f64)>;

/// Largest-remainder apportionment of `n` into the given fractions.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rem: usize = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if rem == 0 {
            break;
        }
        counts[i] += 1;
        rem -= 1;
    }
    counts
}

/// Expand class fractions into the per-case label sequence of a cohort.
pub fn cohort_labels(fractions: &ClassFractions, n: usize) -> Result<Vec<CaseLabels>> {
    if n == 0 {
        return Err(CoreError::Config("cohort size must be >= 1".into()));
    }
    let total: f64 = fractions.iter().map(|(_, f)| f).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CoreError::Config(format!("class fractions sum to {total}, expected 1")));
    }
    let counts = apportion(n, &fractions.iter().map(|(_, f)| *f).collect::<Vec<_>>());
    let mut labels = Vec::with_capacity(n);
    for ((l, _), c) in fractions.iter().zip(counts) {
        labels.extend(std::iter::repeat(*l).take(c));
    }
    Ok(labels)
}

/// Generate an in-memory cohort. Per-case seeds derive deterministically from
/// the master seed, so the output is independent of scheduling.
pub fn generate_cohort(
    spec: &PhantomSpec,
    fractions: &ClassFractions,
    n: usize,
    seed: u64,
) -> Result<Vec<CaseRecord>> {
    spec.validate()?;
    let labels = cohort_labels(fractions, n)?;
    let results = par::map_indices(n, |i| {
        generate_case(spec, labels[i], derive_seed(seed, "case", i as u64), &format!("case{i:04}"))
    });
    results.into_iter().collect()
}

/// The four study splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Internal,
    ExternalA,
    ExternalB,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Internal, Split::ExternalA, Split::ExternalB];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Internal => "internal",
            Split::ExternalA => "external_a",
            Split::ExternalB => "external_b",
        }
    }
}

/// Per-case split assignment, aligned with the input case order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignments: Vec<Split>,
}

impl SplitAssignment {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Stratified split into train / internal / external_a / external_b.
/// Within each class, cases are shuffled (seeded) and apportioned by the
/// fractions, so per-split prevalence matches the cohort within one case.
pub fn split_cohort(
    metas: &[CaseMeta],
    fractions: [f64; 4],
    task: Task,
    seed: u64,
) -> Result<SplitAssignment> {
    use rand::seq::SliceRandom;
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CoreError::Config(format!("split fractions sum to {total}, expected 1")));
    }
    let n_active = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, m) in metas.iter().enumerate() {
        let class = task.class_of(m).ok_or_else(|| {
            CoreError::Stratification(format!(
                "case {} lacks the {} stratification label",
                m.case_id,
                task.name()
            ))
        })?;
        by_class.entry(class).or_default().push(i);
    }
    let mut assignments = vec![Split::Train; metas.len()];
    for (class, mut idx) in by_class {
        if idx.len() < n_active {
            return Err(CoreError::Stratification(format!(
                "class {class} has {} cases for {n_active} splits",
                idx.len()
            )));
        }
        let mut rng = crate::rng::rng_for(seed, "split", class as u64);
        idx.shuffle(&mut rng);
        let counts = apportion(idx.len(), &fractions);
        let mut cursor = 0;
        for (s, &c) in Split::ALL.iter().zip(counts.iter()) {
            for &case in &idx[cursor..cursor + c] {
                assignments[case] = *s;
            }
            cursor += c;
        }
    }
    Ok(SplitAssignment { assignments })
}
