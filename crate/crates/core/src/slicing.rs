//! Training-sample construction: whole-tumor / tumor-core derivation,
//! max-core slice selection with +/-2 neighbours, and bounding-box ground
//! truth. Each selected slice set becomes an independent training sample.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::cohort::{CaseRecord, Task};
use crate::error::{CoreError, Result};
use crate::preprocess::PriorFeatures;
use crate::volume::{MultiClassMask, Plane, EDEMA, ENHANCING, NECROTIC_CORE};

/// Inclusive bounding box (row_min, col_min, row_max, col_max).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

/// One 2D training sample: stacked modality slices, tumor ground truth, and
/// the case's prior features.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub plane: Plane,
    pub slice_index: usize,
    /// (channels, rows, cols); channel order T1c, T2[, FLAIR].
    pub channels: Array3<f64>,
    pub gt_mask: Array2<u8>,
    pub gt_bbox: BBox,
    /// 0 or 1 (foreground classes of the task).
    pub gt_class: usize,
    pub priors: PriorFeatures,
}

/// Whole tumor: union of edema, non-enhancing/necrotic core, and enhancing
/// tumor (codes 1, 2, 3).
pub fn whole_tumor(mask: &MultiClassMask) -> Array3<bool> {
    mask.labels.mapv(|c| c == EDEMA || c == NECROTIC_CORE || c == ENHANCING)
}

/// Tumor core: edema excluded (codes 2, 3).
pub fn tumor_core(mask: &MultiClassMask) -> Array3<bool> {
    mask.labels.mapv(|c| c == NECROTIC_CORE || c == ENHANCING)
}

fn core_area(core: &Array3<bool>, plane: Plane, index: usize) -> usize {
    let axis = match plane {
        Plane::Axial => ndarray::Axis(0),
        Plane::Coronal => ndarray::Axis(1),
        Plane::Sagittal => ndarray::Axis(2),
    };
    core.index_axis(axis, index).iter().filter(|&&b| b).count()
}

/// Slice indices {n-2, n, n+2} where n maximizes tumor-core area in the
/// plane (first maximum wins), clipped to volume bounds and de-duplicated.
pub fn select_training_slices(mask: &MultiClassMask, plane: Plane) -> Result<Vec<usize>> {
    let core = tumor_core(mask);
    let n_slices = match plane {
        Plane::Axial => mask.shape().0,
        Plane::Coronal => mask.shape().1,
        Plane::Sagittal => mask.shape().2,
    };
    let mut best: Option<(usize, usize)> = None;
    for i in 0..n_slices {
        let area = core_area(&core, plane, i);
        if area > 0 && best.map_or(true, |(_, a)| area > a) {
            best = Some((i, area));
        }
    }
    let (n, _) = best.ok_or_else(|| CoreError::Degenerate("tumor core is empty".into()))?;
    let mut indices: Vec<usize> = [n as i64 - 2, n as i64, n as i64 + 2]
        .iter()
        .map(|&i| i.clamp(0, n_slices as i64 - 1) as usize)
        .collect();
    indices.sort_unstable();
    indices.dedup();
    Ok(indices)
}

/// Tightest rectangle enclosing the set voxels of a 2D binary slice.
pub fn mask_to_bbox(slice_mask: &Array2<u8>) -> Result<BBox> {
    let mut bbox: Option<BBox> = None;
    for ((r, c), &v) in slice_mask.indexed_iter() {
        if v != 0 {
            bbox = Some(match bbox {
                None => BBox { row_min: r, col_min: c, row_max: r, col_max: c },
                Some(b) => BBox {
                    row_min: b.row_min.min(r),
                    col_min: b.col_min.min(c),
                    row_max: b.row_max.max(r),
                    col_max: b.col_max.max(c),
                },
            });
        }
    }
    bbox.ok_or_else(|| CoreError::Degenerate("empty slice mask has no bounding box".into()))
}

/// Build the per-plane training samples of one case: one sample per selected
/// slice whose whole-tumor cross-section is nonempty.
pub fn assemble_training_samples(
    case: &CaseRecord,
    plane: Plane,
    task: Task,
    priors: PriorFeatures,
) -> Result<Vec<TrainingSample>> {
    let gt_class = task.class_of(&case.meta).ok_or_else(|| {
        CoreError::Config(format!(
            "case {} has no {} label",
            case.meta.case_id,
            task.name()
        ))
    })?;
    for m in task.modalities() {
        if !case.modalities.contains_key(m) {
            return Err(CoreError::Config(format!(
                "case {} is missing modality {} required by task {}",
                case.meta.case_id,
                m.name(),
                task.name()
            )));
        }
    }
    let whole = whole_tumor(&case.mask);
    let indices = select_training_slices(&case.mask, plane)?;
    let axis = match plane {
        Plane::Axial => ndarray::Axis(0),
        Plane::Coronal => ndarray::Axis(1),
        Plane::Sagittal => ndarray::Axis(2),
    };
    let mut samples = Vec::new();
    for idx in indices {
        let gt_mask: Array2<u8> = whole.index_axis(axis, idx).mapv(|b| u8::from(b));
        // slices outside the whole-tumor extent carry no detection target
        let Ok(gt_bbox) = mask_to_bbox(&gt_mask) else {
            continue;
        };
        let slices: Vec<Array2<f64>> = task
            .modalities()
            .iter()
            .map(|m| case.modalities[m].slice_2d(plane, idx))
            .collect();
        let (h, w) = slices[0].dim();
        let mut channels = Array3::<f64>::zeros((slices.len(), h, w));
        for (c, s) in slices.iter().enumerate() {
            channels.index_axis_mut(ndarray::Axis(0), c).assign(s);
        }
        samples.push(TrainingSample {
            plane,
            slice_index: idx,
            channels,
            gt_mask,
            gt_bbox,
            gt_class,
            priors,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3 as A3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn mask_from(labels: A3<u8>) -> MultiClassMask {
        MultiClassMask::new(labels).unwrap()
    }

    #[test]
    fn whole_and_core_from_single_voxels() {
        let mut labels = A3::<u8>::zeros((8, 8, 8));
        labels[[1, 1, 1]] = 1;
        labels[[2, 2, 2]] = 2;
        labels[[3, 3, 3]] = 3;
        let m = mask_from(labels);
        assert_eq!(whole_tumor(&m).iter().filter(|&&b| b).count(), 3);
        assert_eq!(tumor_core(&m).iter().filter(|&&b| b).count(), 2);
    }

    #[test]
    fn core_subset_of_whole_with_edema_difference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let labels = A3::from_shape_fn((10, 10, 10), |_| rng.gen_range(0u8..4));
        let m = mask_from(labels.clone());
        let whole = whole_tumor(&m);
        let core = tumor_core(&m);
        for (idx, &c) in labels.indexed_iter() {
            assert_eq!(core[idx], c == 2 || c == 3);
            assert!(!core[idx] || whole[idx]);
            assert_eq!(whole[idx] && !core[idx], c == 1);
        }
    }

    #[test]
    fn single_slice_core_selects_neighbours() {
        let mut labels = A3::<u8>::zeros((20, 20, 20));
        for y in 5..10 {
            for x in 5..10 {
                labels[[10, y, x]] = 2;
            }
        }
        let m = mask_from(labels);
        assert_eq!(select_training_slices(&m, Plane::Axial).unwrap(), vec![8, 10, 12]);
    }

    #[test]
    fn argmax_tie_takes_first_maximum() {
        // core areas per axial slice: 3, 7, 7, 2 -> n = 1
        let mut labels = A3::<u8>::zeros((8, 8, 8));
        for (slice, count) in [(0usize, 3usize), (1, 7), (2, 7), (3, 2)] {
            for i in 0..count {
                labels[[slice, i / 8, i % 8]] = 3;
            }
        }
        let m = mask_from(labels);
        let indices = select_training_slices(&m, Plane::Axial).unwrap();
        assert_eq!(indices, vec![0, 1, 3]); // n=1, clipped n-2 -> 0
    }

    #[test]
    fn edge_core_clips_and_dedups() {
        let mut labels = A3::<u8>::zeros((8, 8, 8));
        labels[[0, 4, 4]] = 2;
        let m = mask_from(labels);
        assert_eq!(select_training_slices(&m, Plane::Axial).unwrap(), vec![0, 2]);
    }

    #[test]
    fn empty_core_errors() {
        let mut labels = A3::<u8>::zeros((8, 8, 8));
        labels[[4, 4, 4]] = 1; // edema only
        let m = mask_from(labels);
        assert!(select_training_slices(&m, Plane::Axial).is_err());
    }

    #[test]
    fn bbox_basics() {
        let mut s = Array2::<u8>::zeros((10, 12));
        s[[4, 7]] = 1;
        assert_eq!(
            mask_to_bbox(&s).unwrap(),
            BBox { row_min: 4, col_min: 7, row_max: 4, col_max: 7 }
        );
        s[[1, 1]] = 1;
        s[[5, 9]] = 1;
        assert_eq!(
            mask_to_bbox(&s).unwrap(),
            BBox { row_min: 1, col_min: 1, row_max: 5, col_max: 9 }
        );
        assert!(mask_to_bbox(&Array2::<u8>::zeros((4, 4))).is_err());
    }

    #[test]
    fn bbox_matches_exhaustive_scan_and_is_minimal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let s = Array2::from_shape_fn((16, 16), |_| u8::from(rng.gen_bool(0.1)));
            if s.iter().all(|&v| v == 0) {
                continue;
            }
            let b = mask_to_bbox(&s).unwrap();
            let (mut rmin, mut cmin, mut rmax, mut cmax) = (usize::MAX, usize::MAX, 0, 0);
            for ((r, c), &v) in s.indexed_iter() {
                if v != 0 {
                    rmin = rmin.min(r);
                    cmin = cmin.min(c);
                    rmax = rmax.max(r);
                    cmax = cmax.max(c);
                }
            }
            assert_eq!(b, BBox { row_min: rmin, col_min: cmin, row_max: rmax, col_max: cmax });
            // shrinking any side excludes a set voxel
            assert!((b.row_min..=b.row_max).any(|r| s[[r, b.col_min]] != 0));
            assert!((b.row_min..=b.row_max).any(|r| s[[r, b.col_max]] != 0));
            assert!((b.col_min..=b.col_max).any(|c| s[[b.row_min, c]] != 0));
            assert!((b.col_min..=b.col_max).any(|c| s[[b.row_max, c]] != 0));
        }
    }

    fn hand_case(whole_slices: std::ops::RangeInclusive<usize>) -> CaseRecord {
        use crate::cohort::{CaseMeta, CodelStatus, Event, Grade, IdhStatus, Modality, Sex};
        use crate::volume::Volume;
        use std::collections::BTreeMap;
        let shape = (16, 16, 16);
        let mut labels = A3::<u8>::zeros(shape);
        for z in whole_slices {
            for y in 6..10 {
                for x in 6..10 {
                    labels[[z, y, x]] = if z == 8 { 2 } else { 1 };
                }
            }
        }
        let mut modalities = BTreeMap::new();
        for m in [Modality::T1c, Modality::T2, Modality::Flair] {
            modalities.insert(m, Volume::new(A3::from_elem(shape, 1.0), [1.0; 3]).unwrap());
        }
        CaseRecord {
            meta: CaseMeta {
                case_id: "h0".into(),
                age_years: 44.0,
                sex: Sex::M,
                grade: Grade::III,
                idh: IdhStatus::Mutant,
                codel: CodelStatus::Unknown,
                os_months: Some(10.0),
                event: Some(Event::Observed),
            },
            modalities,
            mask: mask_from(labels),
        }
    }

    fn priors() -> crate::preprocess::PriorFeatures {
        crate::preprocess::PriorFeatures { age_std: 0.0, loc_probs: [0.0; 9] }
    }

    #[test]
    fn interior_case_yields_three_samples() {
        let case = hand_case(5..=11);
        let samples =
            assemble_training_samples(&case, Plane::Axial, Task::Idh, priors()).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(
            samples.iter().map(|s| s.slice_index).collect::<Vec<_>>(),
            vec![6, 8, 10]
        );
        assert_eq!(samples[0].channels.dim().0, 3);
        assert_eq!(samples[0].gt_class, 1);
        for s in &samples {
            assert_eq!(s.gt_bbox, mask_to_bbox(&s.gt_mask).unwrap());
        }
    }

    #[test]
    fn neighbour_slices_without_tumor_are_dropped() {
        // whole tumor only on the core slice: n-2 and n+2 carry no target
        let case = hand_case(8..=8);
        let samples =
            assemble_training_samples(&case, Plane::Axial, Task::Idh, priors()).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].slice_index, 8);
    }

    #[test]
    fn missing_modality_is_a_task_configuration_error() {
        let mut case = hand_case(5..=11);
        case.modalities.remove(&crate::cohort::Modality::Flair);
        let err = assemble_training_samples(&case, Plane::Axial, Task::Idh, priors());
        assert!(matches!(err, Err(CoreError::Config(_))));
        // 1p/19q needs only T1c and T2
        case.meta.codel = crate::cohort::CodelStatus::Codeleted;
        assert!(assemble_training_samples(&case, Plane::Axial, Task::Codel, priors()).is_ok());
    }

    #[test]
    fn selection_matches_brute_force_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let labels = A3::from_shape_fn((12, 12, 12), |_| {
                if rng.gen_bool(0.05) {
                    rng.gen_range(1u8..4)
                } else {
                    0
                }
            });
            let m = match MultiClassMask::new(labels.clone()) {
                Ok(m) => m,
                Err(_) => continue,
            };
            for plane in Plane::ALL {
                let ours = select_training_slices(&m, plane);
                // brute force
                let core = tumor_core(&m);
                let mut best: Option<(usize, usize)> = None;
                for i in 0..12 {
                    let a = core_area(&core, plane, i);
                    if a > 0 && best.map_or(true, |(_, ba)| a > ba) {
                        best = Some((i, a));
                    }
                }
                match best {
                    None => assert!(ours.is_err()),
                    Some((n, _)) => {
                        let mut expected: Vec<usize> = [n as i64 - 2, n as i64, n as i64 + 2]
                            .iter()
                            .map(|&i| i.clamp(0, 11) as usize)
                            .collect();
                        expected.sort_unstable();
                        expected.dedup();
                        assert_eq!(ours.unwrap(), expected);
                    }
                }
            }
        }
    }
}
