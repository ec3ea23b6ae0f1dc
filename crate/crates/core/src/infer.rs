//! Full-volume, three-plane inference: per-plane majority voting over
//! detected slices and cross-plane 2.5D aggregation, including the BG
//! (no-detection) outcome.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::cohort::{CaseRecord, Task};
use crate::error::{CoreError, Result};
use crate::eval::PredLabel;
use crate::net::Model;
use crate::preprocess::PriorFeatures;
use crate::volume::Plane;

/// Outcome of one planar model over a whole volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarPrediction {
    pub plane: Plane,
    /// Votes for (class0, class1) over detected slices.
    pub votes: [usize; 2],
    /// Summed top-detection confidence per class, used only for tie breaks.
    pub confidence: [f64; 2],
    pub detected_slices: usize,
    pub verdict: Verdict,
    pub tie_broken: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Class0,
    Class1,
    Abstain,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Class0 => "class0",
            Verdict::Class1 => "class1",
            Verdict::Abstain => "abstain",
        }
    }
}

/// Builds a planar prediction from per-slice votes of (class, confidence).
/// An even split among detected slices is broken toward the class with the
/// larger summed detection confidence.
pub fn tally_plane(plane: Plane, slice_votes: &[(usize, f64)]) -> PlanarPrediction {
    let mut votes = [0usize; 2];
    let mut confidence = [0.0f64; 2];
    for &(class, conf) in slice_votes {
        votes[class] += 1;
        confidence[class] += conf;
    }
    let detected = slice_votes.len();
    let (verdict, tie_broken) = if detected == 0 {
        (Verdict::Abstain, false)
    } else if votes[0] > votes[1] {
        (Verdict::Class0, false)
    } else if votes[1] > votes[0] {
        (Verdict::Class1, false)
    } else if confidence[0] >= confidence[1] {
        (Verdict::Class0, true)
    } else {
        (Verdict::Class1, true)
    };
    PlanarPrediction { plane, votes, confidence, detected_slices: detected, verdict, tie_broken }
}

/// Runs every slice of one plane through the model; each slice with at least
/// one above-threshold detection contributes one vote — the class of its
/// top-scoring detection.
pub fn predict_plane(
    model: &mut Model,
    case: &CaseRecord,
    plane: Plane,
    task: Task,
    priors: &PriorFeatures,
) -> Result<PlanarPrediction> {
    let mods = task.modalities();
    let vols: Vec<_> = mods
        .iter()
        .map(|m| {
            case.modalities.get(m).ok_or_else(|| {
                CoreError::Config(format!(
                    "case {} lacks modality {m} required by task {task}",
                    case.meta.case_id
                ))
            })
        })
        .collect::<Result<_>>()?;
    let n = vols[0].n_slices(plane);
    let mut slice_votes = Vec::new();
    for idx in 0..n {
        let first = vols[0].slice_2d(plane, idx);
        let (h, w) = first.dim();
        let mut channels = Array3::zeros((vols.len(), h, w));
        for (c, v) in vols.iter().enumerate() {
            channels
                .index_axis_mut(ndarray::Axis(0), c)
                .assign(&v.slice_2d(plane, idx));
        }
        let dets = model.forward(&channels, Some(priors))?;
        if let Some(best) = dets
            .iter()
            .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap())
        {
            slice_votes.push((best.top_class(), best.score));
        }
    }
    Ok(tally_plane(plane, &slice_votes))
}

/// Case-level 2.5D outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalPrediction {
    pub label: PredLabel,
    pub verdicts: [Verdict; 3],
    pub tie_broken: bool,
    /// Pooled class1 vote fraction across planes; `bg_score` for BG.
    pub score: f64,
}

/// Majority vote across the non-abstaining planes. All three abstaining is
/// the BG outcome. A 1–1 split between two voting planes is broken by total
/// vote counts, then by summed confidence.
pub fn aggregate_views_with(
    planes: &[PlanarPrediction; 3],
    bg_score: f64,
) -> FinalPrediction {
    let verdicts = [planes[0].verdict, planes[1].verdict, planes[2].verdict];
    let voting: Vec<&PlanarPrediction> =
        planes.iter().filter(|p| p.verdict != Verdict::Abstain).collect();
    let total_votes: usize = planes.iter().map(|p| p.votes[0] + p.votes[1]).sum();
    let class1_votes: usize = planes.iter().map(|p| p.votes[1]).sum();
    let mut tie_broken = planes.iter().any(|p| p.tie_broken);
    let label = if voting.is_empty() {
        PredLabel::Bg
    } else {
        let c1 = voting.iter().filter(|p| p.verdict == Verdict::Class1).count();
        let c0 = voting.len() - c1;
        if c0 > c1 {
            PredLabel::Class0
        } else if c1 > c0 {
            PredLabel::Class1
        } else {
            // exactly two voting planes split 1-1
            tie_broken = true;
            let v0: usize = voting
                .iter()
                .filter(|p| p.verdict == Verdict::Class0)
                .map(|p| p.votes[0] + p.votes[1])
                .sum();
            let v1: usize = voting
                .iter()
                .filter(|p| p.verdict == Verdict::Class1)
                .map(|p| p.votes[0] + p.votes[1])
                .sum();
            if v0 > v1 {
                PredLabel::Class0
            } else if v1 > v0 {
                PredLabel::Class1
            } else {
                let conf0: f64 = voting.iter().map(|p| p.confidence[0]).sum();
                let conf1: f64 = voting.iter().map(|p| p.confidence[1]).sum();
                if conf0 >= conf1 {
                    PredLabel::Class0
                } else {
                    PredLabel::Class1
                }
            }
        }
    };
    let score = if label == PredLabel::Bg || total_votes == 0 {
        bg_score
    } else {
        class1_votes as f64 / total_votes as f64
    };
    FinalPrediction { label, verdicts, tie_broken, score }
}

/// [`aggregate_views_with`] using the default BG score of 0.0.
pub fn aggregate_views(planes: &[PlanarPrediction; 3]) -> FinalPrediction {
    aggregate_views_with(planes, 0.0)
}

/// Case outcome from a single planar model (the non-2.5D ablation views).
pub fn planar_final(p: &PlanarPrediction, bg_score: f64) -> FinalPrediction {
    let label = match p.verdict {
        Verdict::Class0 => PredLabel::Class0,
        Verdict::Class1 => PredLabel::Class1,
        Verdict::Abstain => PredLabel::Bg,
    };
    let total = p.votes[0] + p.votes[1];
    let score = if total == 0 { bg_score } else { p.votes[1] as f64 / total as f64 };
    FinalPrediction {
        label,
        verdicts: [p.verdict; 3],
        tie_broken: p.tie_broken,
        score,
    }
}

/// One row of the predictions CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub case_id: String,
    pub task: String,
    pub axial_verdict: String,
    pub axial_votes0: usize,
    pub axial_votes1: usize,
    pub coronal_verdict: String,
    pub coronal_votes0: usize,
    pub coronal_votes1: usize,
    pub sagittal_verdict: String,
    pub sagittal_votes0: usize,
    pub sagittal_votes1: usize,
    pub label: String,
    pub score: f64,
    pub tie_broken: bool,
    /// Ground-truth class when known: "class0", "class1", or "unknown".
    pub truth: String,
}

impl PredictionRow {
    pub fn new(
        case_id: &str,
        task: Task,
        planes: &[PlanarPrediction; 3],
        fp: &FinalPrediction,
        truth: Option<usize>,
    ) -> Self {
        let label = match fp.label {
            PredLabel::Class0 => "class0",
            PredLabel::Class1 => "class1",
            PredLabel::Bg => "BG",
        };
        PredictionRow {
            case_id: case_id.to_string(),
            task: task.to_string(),
            axial_verdict: planes[0].verdict.as_str().to_string(),
            axial_votes0: planes[0].votes[0],
            axial_votes1: planes[0].votes[1],
            coronal_verdict: planes[1].verdict.as_str().to_string(),
            coronal_votes0: planes[1].votes[0],
            coronal_votes1: planes[1].votes[1],
            sagittal_verdict: planes[2].verdict.as_str().to_string(),
            sagittal_votes0: planes[2].votes[0],
            sagittal_votes1: planes[2].votes[1],
            label: label.to_string(),
            score: fp.score,
            tie_broken: fp.tie_broken,
            truth: match truth {
                Some(0) => "class0".to_string(),
                Some(_) => "class1".to_string(),
                None => "unknown".to_string(),
            },
        }
    }

    pub fn pred_label(&self) -> Result<PredLabel> {
        match self.label.as_str() {
            "class0" => Ok(PredLabel::Class0),
            "class1" => Ok(PredLabel::Class1),
            "BG" => Ok(PredLabel::Bg),
            other => Err(CoreError::Data(format!("unknown predicted label '{other}'"))),
        }
    }

    pub fn truth_class(&self) -> Result<Option<usize>> {
        match self.truth.as_str() {
            "class0" => Ok(Some(0)),
            "class1" => Ok(Some(1)),
            "unknown" => Ok(None),
            other => Err(CoreError::Data(format!("unknown truth label '{other}'"))),
        }
    }
}

pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CoreError::Data(format!("cannot write predictions: {e}")))?;
    for row in rows {
        w.serialize(row).map_err(|e| CoreError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CoreError::Data(e.to_string()))?;
    Ok(())
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CoreError::Data(format!("cannot read predictions {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec.map_err(|e| CoreError::Data(e.to_string()))?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planar(plane: Plane, votes0: usize, votes1: usize) -> PlanarPrediction {
        let slice_votes: Vec<(usize, f64)> = std::iter::repeat((0usize, 0.8))
            .take(votes0)
            .chain(std::iter::repeat((1usize, 0.9)).take(votes1))
            .collect();
        tally_plane(plane, &slice_votes)
    }

    #[test]
    fn majority_vote_within_plane() {
        let p = planar(Plane::Axial, 7, 3);
        assert_eq!(p.verdict, Verdict::Class0);
        assert_eq!(p.votes, [7, 3]);
        assert_eq!(p.detected_slices, 10);
        assert!(!p.tie_broken);
        assert_eq!(planar(Plane::Axial, 3, 7).verdict, Verdict::Class1);
    }

    #[test]
    fn plane_without_detections_abstains() {
        let p = tally_plane(Plane::Coronal, &[]);
        assert_eq!(p.verdict, Verdict::Abstain);
        assert_eq!(p.detected_slices, 0);
    }

    #[test]
    fn slice_tie_broken_by_summed_confidence() {
        // 5/5 split but class1 votes carry more confidence
        let votes: Vec<(usize, f64)> = (0..5)
            .map(|_| (0usize, 0.6))
            .chain((0..5).map(|_| (1usize, 0.9)))
            .collect();
        let p = tally_plane(Plane::Sagittal, &votes);
        assert_eq!(p.verdict, Verdict::Class1);
        assert!(p.tie_broken);
    }

    #[test]
    fn aggregate_majority_and_bg() {
        let a = planar(Plane::Axial, 6, 1);
        let c = planar(Plane::Coronal, 4, 2);
        let s = planar(Plane::Sagittal, 1, 5);
        let fp = aggregate_views(&[a, c, s]);
        assert_eq!(fp.label, PredLabel::Class0);
        assert_eq!(fp.verdicts, [Verdict::Class0, Verdict::Class0, Verdict::Class1]);
        // pooled class1 fraction: (1+2+5)/19
        assert!((fp.score - 8.0 / 19.0).abs() < 1e-12);

        let empty = tally_plane(Plane::Axial, &[]);
        let bg = aggregate_views(&[empty, tally_plane(Plane::Coronal, &[]), tally_plane(Plane::Sagittal, &[])]);
        assert_eq!(bg.label, PredLabel::Bg);
        assert_eq!(bg.score, 0.0);
        let bg5 = aggregate_views_with(
            &[empty, tally_plane(Plane::Coronal, &[]), tally_plane(Plane::Sagittal, &[])],
            0.5,
        );
        assert_eq!(bg5.score, 0.5);
    }

    #[test]
    fn one_one_split_broken_by_vote_counts_then_confidence() {
        // two voting planes disagree; class1 plane saw more slices
        let a = planar(Plane::Axial, 4, 1); // class0, 5 votes
        let c = planar(Plane::Coronal, 2, 6); // class1, 8 votes
        let s = tally_plane(Plane::Sagittal, &[]);
        let fp = aggregate_views(&[a, c, s]);
        assert_eq!(fp.label, PredLabel::Class1);
        assert!(fp.tie_broken);
        // equal vote counts: confidence decides (class0 summed 0.8*3=2.4+..)
        let a = tally_plane(Plane::Axial, &[(0, 0.99), (0, 0.99), (1, 0.1)]);
        let c = tally_plane(Plane::Coronal, &[(1, 0.2), (1, 0.2), (0, 0.1)]);
        let fp = aggregate_views(&[a, c, s]);
        assert_eq!(fp.label, PredLabel::Class0);
    }

    #[test]
    fn aggregation_is_plane_order_invariant_for_labels() {
        let a = planar(Plane::Axial, 5, 2);
        let c = planar(Plane::Coronal, 1, 6);
        let s = planar(Plane::Sagittal, 0, 4);
        let l1 = aggregate_views(&[a, c, s]).label;
        let l2 = aggregate_views(&[s, a, c]).label;
        let l3 = aggregate_views(&[c, s, a]).label;
        assert_eq!(l1, l2);
        assert_eq!(l2, l3);
    }

    #[test]
    fn planar_final_maps_abstain_to_bg() {
        let p = tally_plane(Plane::Axial, &[]);
        let fp = planar_final(&p, 0.0);
        assert_eq!(fp.label, PredLabel::Bg);
        assert_eq!(fp.score, 0.0);
        let p = planar(Plane::Axial, 2, 6);
        let fp = planar_final(&p, 0.0);
        assert_eq!(fp.label, PredLabel::Class1);
        assert!((fp.score - 0.75).abs() < 1e-12);
    }

    #[test]
    fn predictions_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        let planes = [
            planar(Plane::Axial, 3, 1),
            planar(Plane::Coronal, 2, 2),
            planar(Plane::Sagittal, 0, 0),
        ];
        let fp = aggregate_views(&planes);
        let row = PredictionRow::new("case0001", crate::cohort::Task::Idh, &planes, &fp, Some(1));
        write_predictions_csv(&path, &[row.clone()]).unwrap();
        let back = read_predictions_csv(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].case_id, "case0001");
        assert_eq!(back[0].truth_class().unwrap(), Some(1));
        assert_eq!(back[0].score, row.score);
    }
}
