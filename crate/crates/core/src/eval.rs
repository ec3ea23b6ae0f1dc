//! Classification metrics: point metrics with BG handling, ROC/PR curves
//! with areas, bootstrap confidence intervals, and the 2x3 confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::par;
use crate::preprocess::percentile;
use crate::rng::rng_for;

/// Final case-level prediction label: one of the two foreground classes, or
/// BG when no plane detected a tumor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredLabel {
    Class0,
    Class1,
    Bg,
}

impl PredLabel {
    pub fn name(self) -> &'static str {
        match self {
            PredLabel::Class0 => "class0",
            PredLabel::Class1 => "class1",
            PredLabel::Bg => "BG",
        }
    }
}

/// Point metrics plus curve areas with bootstrap CI bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    /// `None` when undefined (no predicted positives).
    pub precision: Option<f64>,
    /// `None` when undefined (no true positives in the labels).
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auroc: f64,
    pub auroc_ci: (f64, f64),
    pub auprc: f64,
    pub auprc_ci: (f64, f64),
    pub n: usize,
    pub n_bg: usize,
}

/// Confusion matrix: rows = true class (0, 1); columns = predicted class0,
/// class1, BG.
pub fn confusion_with_bg(preds: &[PredLabel], labels: &[usize]) -> Result<[[usize; 3]; 2]> {
    if preds.len() != labels.len() {
        return Err(CoreError::Data(format!(
            "prediction/label length mismatch: {} vs {}",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = [[0usize; 3]; 2];
    for (&p, &l) in preds.iter().zip(labels) {
        if l > 1 {
            return Err(CoreError::Data(format!("label {l} outside {{0,1}}")));
        }
        let col = match p {
            PredLabel::Class0 => 0,
            PredLabel::Class1 => 1,
            PredLabel::Bg => 2,
        };
        m[l][col] += 1;
    }
    Ok(m)
}

/// Point metrics with the study's BG convention: BG predictions count as
/// incorrect for accuracy and as negative-class predictions for
/// precision/recall. Undefined metrics come back as `None`, never as 0.
pub fn binary_metrics(
    preds: &[PredLabel],
    labels: &[usize],
    positive_class: usize,
) -> Result<(f64, Option<f64>, Option<f64>, Option<f64>)> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(CoreError::Data("empty or mismatched predictions".into()));
    }
    let pos_pred = match positive_class {
        0 => PredLabel::Class0,
        1 => PredLabel::Class1,
        other => return Err(CoreError::Config(format!("positive class {other} invalid"))),
    };
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        let truth_pos = l == positive_class;
        let pred_pos = p == pos_pred; // BG is never the positive prediction
        match (pred_pos, truth_pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        let correct_label = match (p, l) {
            (PredLabel::Class0, 0) | (PredLabel::Class1, 1) => true,
            _ => false, // BG always incorrect
        };
        if correct_label {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / preds.len() as f64;
    let precision = if tp + fp > 0 { Some(tp as f64 / (tp + fp) as f64) } else { None };
    let recall = if tp + fn_ > 0 { Some(tp as f64 / (tp + fn_) as f64) } else { None };
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok((accuracy, precision, recall, f1))
}

fn check_two_classes(labels: &[usize]) -> Result<(usize, usize)> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::Degenerate(
            "both classes must be present for curve metrics".into(),
        ));
    }
    Ok((n_pos, n_neg))
}

/// Sort case indices by descending score, returning groups of tied scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// ROC curve and AUROC. The area equals the pairwise-comparison
/// (Mann-Whitney) statistic with ties credited 0.5, computed from integer
/// pair counts so it matches a brute-force pair scan bit-for-bit.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<(Vec<(f64, f64)>, f64)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(CoreError::Data("empty or mismatched scores".into()));
    }
    let (n_pos, n_neg) = check_two_classes(labels)?;
    // pair counting over descending tie groups: every negative seen strictly
    // earlier loses to a later positive; ties within a group credit 1/2
    let mut wins2: u64 = 0; // 2*wins + ties
    let mut neg_seen: u64 = 0;
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    for g in tie_groups(scores) {
        let gp = g.iter().filter(|&&i| labels[i] == 1).count() as u64;
        let gn = g.len() as u64 - gp;
        // positives in this group beat all negatives with strictly lower
        // scores (counted later), tie with negatives in this group
        wins2 += gp * (n_neg as u64 - neg_seen - gn) * 2 + gp * gn;
        neg_seen += gn;
        tp += gp;
        fp += gn;
        curve.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    let auc = wins2 as f64 / (2 * n_pos as u64 * n_neg as u64) as f64;
    Ok((curve, auc))
}

/// Precision-recall curve and AUPRC by interpolation-free step summation
/// over descending score thresholds.
pub fn pr_auc(scores: &[f64], labels: &[usize]) -> Result<(Vec<(f64, f64)>, f64)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(CoreError::Data("empty or mismatched scores".into()));
    }
    let (n_pos, _) = check_two_classes(labels)?;
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for g in tie_groups(scores) {
        let gp = g.iter().filter(|&&i| labels[i] == 1).count();
        tp += gp;
        fp += g.len() - gp;
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        curve.push((recall, precision));
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok((curve, area))
}

/// Bootstrap CI configuration. The paper's 5th/95th percentile rule is the
/// default; `wide` switches to 2.5/97.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub seed: u64,
    pub wide: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { n_resamples: 1000, seed: 0, wide: false }
    }
}

/// Bootstrap outcome: percentile bounds plus the number of degenerate
/// (single-class) resamples that were skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    pub skipped: usize,
}

/// Percentile bootstrap over case resampling with replacement. Each resample
/// draws its RNG from the master seed, so results are order-independent and
/// reproducible. Resamples where the metric is undefined (single class) are
/// skipped and counted; more than 50% skipped is a reliability error.
pub fn bootstrap_ci<F>(
    scores: &[f64],
    labels: &[usize],
    metric_fn: F,
    config: BootstrapConfig,
) -> Result<BootstrapCi>
where
    F: Fn(&[f64], &[usize]) -> Result<f64> + Sync + Send,
{
    use rand::Rng;
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(CoreError::Data("empty or mismatched scores".into()));
    }
    let n = scores.len();
    let values: Vec<Option<f64>> = par::map_indices(config.n_resamples, |r| {
        let mut rng = rng_for(config.seed, "bootstrap", r as u64);
        let mut s = Vec::with_capacity(n);
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            s.push(scores[i]);
            l.push(labels[i]);
        }
        metric_fn(&s, &l).ok()
    });
    let valid: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    let skipped = config.n_resamples - valid.len();
    if skipped * 2 > config.n_resamples {
        return Err(CoreError::Degenerate(format!(
            "{skipped} of {} bootstrap resamples were degenerate",
            config.n_resamples
        )));
    }
    let (qlo, qhi) = if config.wide { (2.5, 97.5) } else { (5.0, 95.0) };
    Ok(BootstrapCi {
        lo: percentile(&valid, qlo),
        hi: percentile(&valid, qhi),
        skipped,
    })
}

/// Assemble the full metric report for one prediction set.
pub fn metric_report(
    preds: &[PredLabel],
    scores: &[f64],
    labels: &[usize],
    bootstrap: BootstrapConfig,
) -> Result<MetricReport> {
    let (accuracy, precision, recall, f1) = binary_metrics(preds, labels, 1)?;
    let (_, auroc) = roc_auc(scores, labels)?;
    let (_, auprc) = pr_auc(scores, labels)?;
    let roc_ci = bootstrap_ci(scores, labels, |s, l| roc_auc(s, l).map(|(_, a)| a), bootstrap)?;
    let pr_ci = bootstrap_ci(scores, labels, |s, l| pr_auc(s, l).map(|(_, a)| a), bootstrap)?;
    Ok(MetricReport {
        accuracy,
        precision,
        recall,
        f1,
        auroc,
        auroc_ci: (roc_ci.lo, roc_ci.hi),
        auprc,
        auprc_ci: (pr_ci.lo, pr_ci.hi),
        n: labels.len(),
        n_bg: preds.iter().filter(|&&p| p == PredLabel::Bg).count(),
    })
}

/// Brute-force pairwise AUROC oracle: O(n^2) comparison of every
/// (positive, negative) pair with ties credited 0.5.
pub fn auroc_pairwise_oracle(scores: &[f64], labels: &[usize]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn perfect_separation_gives_unit_areas() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [1, 1, 0, 0];
        assert_eq!(roc_auc(&scores, &labels).unwrap().1, 1.0);
        assert_eq!(pr_auc(&scores, &labels).unwrap().1, 1.0);
    }

    #[test]
    fn worked_auroc_example() {
        // 3 of 4 (pos, neg) pairs correctly ordered
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0, 0, 1, 1];
        assert_eq!(roc_auc(&scores, &labels).unwrap().1, 0.75);
    }

    #[test]
    fn all_ties_give_half() {
        let scores = [0.5; 6];
        let labels = [0, 1, 0, 1, 0, 1];
        assert_eq!(roc_auc(&scores, &labels).unwrap().1, 0.5);
    }

    #[test]
    fn single_class_errors() {
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auroc_matches_pairwise_oracle_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        use rand_chacha::rand_core::SeedableRng;
        for _ in 0..100 {
            let n = rng.gen_range(2..30);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
                continue;
            }
            let (_, auc) = roc_auc(&scores, &labels).unwrap();
            assert_eq!(auc, auroc_pairwise_oracle(&scores, &labels));
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let scores: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<usize> = (0..40).map(|_| rng.gen_range(0..2)).collect();
        let (_, a) = roc_auc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp()).collect();
        let (_, b) = roc_auc(&transformed, &labels).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hand_tally_metrics() {
        // TP=3, FP=1, FN=2, TN=4
        let preds = [
            PredLabel::Class1,
            PredLabel::Class1,
            PredLabel::Class1,
            PredLabel::Class1,
            PredLabel::Class0,
            PredLabel::Class0,
            PredLabel::Class0,
            PredLabel::Class0,
            PredLabel::Class0,
            PredLabel::Class0,
        ];
        let labels = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0];
        let (acc, p, r, f1) = binary_metrics(&preds, &labels, 1).unwrap();
        assert!((acc - 0.7).abs() < 1e-12);
        assert!((p.unwrap() - 0.75).abs() < 1e-12);
        assert!((r.unwrap() - 0.6).abs() < 1e-12);
        assert!((f1.unwrap() - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-12);
    }

    #[test]
    fn bg_counts_as_incorrect_negative() {
        let preds = [PredLabel::Bg, PredLabel::Class1];
        let labels = [1, 1];
        let (acc, p, r, _) = binary_metrics(&preds, &labels, 1).unwrap();
        assert!((acc - 0.5).abs() < 1e-12);
        assert_eq!(p, Some(1.0));
        assert_eq!(r, Some(0.5));
        let m = confusion_with_bg(&preds, &labels).unwrap();
        assert_eq!(m, [[0, 0, 0], [0, 1, 1]]);
    }

    #[test]
    fn undefined_precision_is_flagged_not_zero() {
        let preds = [PredLabel::Class0, PredLabel::Bg];
        let labels = [0, 1];
        let (_, p, r, f1) = binary_metrics(&preds, &labels, 1).unwrap();
        assert_eq!(p, None);
        assert_eq!(r, Some(0.0));
        assert_eq!(f1, None);
    }

    #[test]
    fn confusion_rows_sum_to_prevalence() {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let labels: Vec<usize> = (0..50).map(|_| rng.gen_range(0..2)).collect();
        let preds: Vec<PredLabel> = (0..50)
            .map(|_| match rng.gen_range(0..3) {
                0 => PredLabel::Class0,
                1 => PredLabel::Class1,
                _ => PredLabel::Bg,
            })
            .collect();
        let m = confusion_with_bg(&preds, &labels).unwrap();
        for class in 0..2 {
            let prevalence = labels.iter().filter(|&&l| l == class).count();
            assert_eq!(m[class].iter().sum::<usize>(), prevalence);
        }
        assert_eq!(m.iter().flatten().sum::<usize>(), 50);
    }

    #[test]
    fn bootstrap_is_deterministic_and_brackets_point() {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let labels: Vec<usize> = (0..30).map(|i| usize::from(i % 2 == 0)).collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| l as f64 * 0.4 + rng.gen_range(0.0..0.6))
            .collect();
        let cfg = BootstrapConfig { n_resamples: 500, seed: 42, wide: false };
        let f = |s: &[f64], l: &[usize]| roc_auc(s, l).map(|(_, a)| a);
        let a = bootstrap_ci(&scores, &labels, f, cfg).unwrap();
        let b = bootstrap_ci(&scores, &labels, f, cfg).unwrap();
        assert_eq!(a, b);
        let (_, point) = roc_auc(&scores, &labels).unwrap();
        assert!(a.lo <= point && point <= a.hi);
    }

    #[test]
    fn constant_perfect_predictions_give_unit_ci() {
        let labels = [1, 1, 1, 0, 0, 0];
        let scores = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let ci = bootstrap_ci(
            &scores,
            &labels,
            |s, l| roc_auc(s, l).map(|(_, a)| a),
            BootstrapConfig { n_resamples: 200, seed: 1, wide: false },
        )
        .unwrap();
        assert_eq!((ci.lo, ci.hi), (1.0, 1.0));
    }
}
