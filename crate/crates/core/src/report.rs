//! Result assembly: evaluation of prediction files, paired run comparisons
//! (McNemar / generalized score / DeLong), ablation tables, and a
//! human-readable summary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::eval::{
    confusion_with_bg, metric_report, pr_auc, roc_auc, BootstrapConfig, MetricReport, PredLabel,
};
use crate::infer::PredictionRow;
use crate::stats::{delong, delong_aucs, gss_paired_proportions, mcnemar, TestResult};

/// Full evaluation of one predictions file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    pub confusion: [[usize; 3]; 2],
    pub roc_points: Vec<(f64, f64)>,
    pub pr_points: Vec<(f64, f64)>,
}

/// Extracts (preds, scores, labels) from rows with known ground truth.
pub fn unpack_rows(rows: &[PredictionRow]) -> Result<(Vec<PredLabel>, Vec<f64>, Vec<usize>)> {
    let mut preds = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for row in rows {
        let Some(truth) = row.truth_class()? else {
            continue;
        };
        preds.push(row.pred_label()?);
        scores.push(row.score);
        labels.push(truth);
    }
    if labels.is_empty() {
        return Err(CoreError::Data("no prediction rows carry ground truth".into()));
    }
    Ok((preds, scores, labels))
}

pub fn evaluate_predictions(
    rows: &[PredictionRow],
    bootstrap: BootstrapConfig,
) -> Result<Evaluation> {
    let (preds, scores, labels) = unpack_rows(rows)?;
    let report = metric_report(&preds, &scores, &labels, bootstrap)?;
    let confusion = confusion_with_bg(&preds, &labels)?;
    let (roc_points, _) = roc_auc(&scores, &labels)?;
    let (pr_points, _) = pr_auc(&scores, &labels)?;
    Ok(Evaluation { report, confusion, roc_points, pr_points })
}

/// One row of a paired run comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub value_a: f64,
    pub value_b: f64,
    pub difference: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub method: String,
    pub degenerate: bool,
}

fn comparison_row(metric: &str, value_a: f64, value_b: f64, t: &TestResult) -> ComparisonRow {
    ComparisonRow {
        metric: metric.to_string(),
        value_a,
        value_b,
        difference: value_a - value_b,
        statistic: t.statistic,
        p_value: t.p_value,
        method: format!("{:?}", t.method),
        degenerate: t.degenerate,
    }
}

/// Paired comparison of two runs over the same cases: McNemar on paired
/// correctness (precision-style agreement), the generalized score statistic
/// on recall over true positives, and DeLong on the AUROCs.
pub fn compare_runs(a: &[PredictionRow], b: &[PredictionRow]) -> Result<Vec<ComparisonRow>> {
    if a.len() != b.len() {
        return Err(CoreError::Data("runs cover different numbers of cases".into()));
    }
    let mut b_by_id: std::collections::BTreeMap<&str, &PredictionRow> =
        b.iter().map(|r| (r.case_id.as_str(), r)).collect();
    let mut pairs = Vec::with_capacity(a.len());
    for ra in a {
        let rb = b_by_id.remove(ra.case_id.as_str()).ok_or_else(|| {
            CoreError::Data(format!("case {} missing from the second run", ra.case_id))
        })?;
        if ra.truth != rb.truth {
            return Err(CoreError::Data(format!(
                "case {} has inconsistent ground truth across runs",
                ra.case_id
            )));
        }
        pairs.push((ra, rb));
    }
    let (preds_a, scores_a, labels) =
        unpack_rows(&pairs.iter().map(|(ra, _)| (*ra).clone()).collect::<Vec<_>>())?;
    let (preds_b, scores_b, _) =
        unpack_rows(&pairs.iter().map(|(_, rb)| (*rb).clone()).collect::<Vec<_>>())?;

    let correct = |p: PredLabel, l: usize| {
        matches!((p, l), (PredLabel::Class0, 0) | (PredLabel::Class1, 1))
    };
    let ca: Vec<bool> = preds_a.iter().zip(&labels).map(|(&p, &l)| correct(p, l)).collect();
    let cb: Vec<bool> = preds_b.iter().zip(&labels).map(|(&p, &l)| correct(p, l)).collect();
    let mc = mcnemar(&ca, &cb)?;

    // recall over the true positives: did each run call the case class1?
    let pos_idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let hit_a: Vec<bool> = pos_idx.iter().map(|&i| preds_a[i] == PredLabel::Class1).collect();
    let hit_b: Vec<bool> = pos_idx.iter().map(|&i| preds_b[i] == PredLabel::Class1).collect();
    let gss = gss_paired_proportions(&hit_a, &hit_b)?;

    let dl = delong(&scores_a, &scores_b, &labels)?;
    let (auc_a, auc_b) = delong_aucs(&scores_a, &scores_b, &labels);

    let acc = |c: &[bool]| c.iter().filter(|&&v| v).count() as f64 / c.len() as f64;
    let rec = |h: &[bool]| h.iter().filter(|&&v| v).count() as f64 / h.len().max(1) as f64;
    Ok(vec![
        comparison_row("accuracy", acc(&ca), acc(&cb), &mc),
        comparison_row("recall", rec(&hit_a), rec(&hit_b), &gss),
        comparison_row("auroc", auc_a, auc_b, &dl),
    ])
}

pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CoreError::Data(format!("cannot write comparison: {e}")))?;
    for row in rows {
        w.serialize(row).map_err(|e| CoreError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CoreError::Data(e.to_string()))?;
    Ok(())
}

/// One cell of an ablation grid: a scheme or view evaluated on one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    /// Fusion scheme ("none", "age", ...) or view ("axial", "2.5D", ...).
    pub scheme: String,
    pub split: String,
    pub n: usize,
    pub accuracy: f64,
    pub auroc: f64,
    pub auroc_lo: f64,
    pub auroc_hi: f64,
    pub auprc: f64,
    /// AUROC difference vs the proposed (reference) scheme on the same split.
    pub diff_vs_proposed: f64,
    /// DeLong p-value vs the proposed scheme; 1.0 for the reference itself.
    pub p_vs_proposed: f64,
}

/// Builds the ablation table: each scheme is compared against `proposed` on
/// its own split with the DeLong test.
pub fn ablation_table(
    runs: &[(String, String, Vec<PredictionRow>)],
    proposed: &str,
    bootstrap: BootstrapConfig,
) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    for (scheme, split, rows) in runs {
        let eval = evaluate_predictions(rows, bootstrap)?;
        let reference = runs
            .iter()
            .find(|(s, sp, _)| s == proposed && sp == split)
            .ok_or_else(|| {
                CoreError::Config(format!("proposed scheme '{proposed}' missing on split '{split}'"))
            })?;
        let (diff, p) = if scheme == proposed {
            (0.0, 1.0)
        } else {
            let cmp = compare_runs(rows, &reference.2)?;
            let auc_row = cmp.iter().find(|r| r.metric == "auroc").unwrap();
            (auc_row.difference, auc_row.p_value)
        };
        cells.push(AblationCell {
            scheme: scheme.clone(),
            split: split.clone(),
            n: eval.report.n,
            accuracy: eval.report.accuracy,
            auroc: eval.report.auroc,
            auroc_lo: eval.report.auroc_ci.0,
            auroc_hi: eval.report.auroc_ci.1,
            auprc: eval.report.auprc,
            diff_vs_proposed: diff,
            p_vs_proposed: p,
        });
    }
    Ok(cells)
}

pub fn write_ablation_csv(path: &Path, cells: &[AblationCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CoreError::Data(format!("cannot write ablation table: {e}")))?;
    for cell in cells {
        w.serialize(cell).map_err(|e| CoreError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CoreError::Data(e.to_string()))?;
    Ok(())
}

/// Headline-style text block for one task across splits, mirroring the
/// format "task — split: AUROC x.xxx (CI lo–hi), AUPRC x.xxx, n=N (BG k)".
pub fn summary_text(task: &str, rows: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{task}\n"));
    for (split, r) in rows {
        let precision = r.precision.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        let recall = r.recall.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        out.push_str(&format!(
            "  {split}: AUROC {:.3} ({:.3}-{:.3}), AUPRC {:.3} ({:.3}-{:.3}), \
             accuracy {:.3}, precision {precision}, recall {recall}, n={} (BG {})\n",
            r.auroc, r.auroc_ci.0, r.auroc_ci.1, r.auprc, r.auprc_ci.0, r.auprc_ci.1,
            r.accuracy, r.n, r.n_bg
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Task;
    use crate::infer::{aggregate_views, tally_plane, PlanarPrediction};
    use crate::volume::Plane;

    fn row(case: usize, votes1: usize, votes0: usize, truth: usize) -> PredictionRow {
        let planes: [PlanarPrediction; 3] = [
            tally_plane(
                Plane::Axial,
                &std::iter::repeat((0usize, 0.7))
                    .take(votes0)
                    .chain(std::iter::repeat((1usize, 0.8)).take(votes1))
                    .collect::<Vec<_>>(),
            ),
            tally_plane(Plane::Coronal, &[]),
            tally_plane(Plane::Sagittal, &[]),
        ];
        let fp = aggregate_views(&planes);
        PredictionRow::new(&format!("case{case:04}"), Task::Idh, &planes, &fp, Some(truth))
    }

    fn good_run() -> Vec<PredictionRow> {
        // 6 cases, mostly correct, varied scores
        vec![
            row(0, 9, 1, 1),
            row(1, 7, 3, 1),
            row(2, 6, 4, 1),
            row(3, 1, 9, 0),
            row(4, 2, 8, 0),
            row(5, 4, 6, 0),
        ]
    }

    fn weak_run() -> Vec<PredictionRow> {
        vec![
            row(0, 6, 4, 1),
            row(1, 4, 6, 1), // miss
            row(2, 5, 5, 1),
            row(3, 4, 6, 0),
            row(4, 6, 4, 0), // miss
            row(5, 5, 5, 0),
        ]
    }

    #[test]
    fn evaluation_reports_confusion_and_curves() {
        let cfg = BootstrapConfig { n_resamples: 50, seed: 1, wide: false };
        let eval = evaluate_predictions(&good_run(), cfg).unwrap();
        assert_eq!(eval.report.n, 6);
        assert_eq!(eval.confusion.iter().flatten().sum::<usize>(), 6);
        assert!(eval.report.auroc > 0.9);
        assert!(!eval.roc_points.is_empty());
    }

    #[test]
    fn self_comparison_is_null() {
        let rows = compare_runs(&good_run(), &good_run()).unwrap();
        for r in &rows {
            assert_eq!(r.difference, 0.0, "{}", r.metric);
            assert!(r.p_value > 0.99, "{}: p = {}", r.metric, r.p_value);
        }
    }

    #[test]
    fn stronger_run_shows_positive_differences() {
        let rows = compare_runs(&good_run(), &weak_run()).unwrap();
        let auc = rows.iter().find(|r| r.metric == "auroc").unwrap();
        assert!(auc.difference > 0.0);
        assert!(auc.value_a > auc.value_b);
        let acc = rows.iter().find(|r| r.metric == "accuracy").unwrap();
        assert!(acc.difference > 0.0);
    }

    #[test]
    fn mismatched_case_sets_rejected() {
        let mut b = good_run();
        b[0].case_id = "case9999".into();
        assert!(compare_runs(&good_run(), &b).is_err());
    }

    #[test]
    fn ablation_table_references_proposed() {
        let cfg = BootstrapConfig { n_resamples: 50, seed: 2, wide: false };
        let runs = vec![
            ("none".to_string(), "internal".to_string(), weak_run()),
            ("age".to_string(), "internal".to_string(), good_run()),
        ];
        let cells = ablation_table(&runs, "age", cfg).unwrap();
        assert_eq!(cells.len(), 2);
        let reference = cells.iter().find(|c| c.scheme == "age").unwrap();
        assert_eq!(reference.diff_vs_proposed, 0.0);
        assert_eq!(reference.p_vs_proposed, 1.0);
        let none = cells.iter().find(|c| c.scheme == "none").unwrap();
        assert!(none.diff_vs_proposed < 0.0);
        assert!(none.p_vs_proposed <= 1.0);
        // cell values equal an independent single evaluation
        let solo = evaluate_predictions(&weak_run(), cfg).unwrap();
        assert_eq!(none.auroc, solo.report.auroc);
        assert_eq!(none.accuracy, solo.report.accuracy);
    }

    #[test]
    fn summary_text_contains_headline_numbers() {
        let report = MetricReport {
            accuracy: 0.9,
            precision: Some(0.88),
            recall: Some(0.92),
            f1: Some(0.9),
            auroc: 0.925,
            auroc_ci: (0.88, 0.96),
            auprc: 0.91,
            auprc_ci: (0.85, 0.95),
            n: 100,
            n_bg: 2,
        };
        let text = summary_text("IDH", &[("internal".to_string(), report)]);
        assert!(text.contains("AUROC 0.925"));
        assert!(text.contains("n=100 (BG 2)"));
    }
}
