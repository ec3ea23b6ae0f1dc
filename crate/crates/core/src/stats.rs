//! Paired and unpaired hypothesis tests for classifier comparison and
//! cohort demographics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF, Normal};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    McnemarChiSquare,
    McnemarExact,
    GeneralizedScore,
    Delong,
    ChiSquareIndependence,
    MannWhitney,
}

/// Outcome of a hypothesis test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Estimate of the quantity under test (difference for paired tests).
    pub estimate: f64,
    pub method: Method,
    /// Set when the sampling variance degenerated to zero with a nonzero
    /// difference; the p-value is then not meaningful.
    pub degenerate: bool,
}

fn chi2_sf(stat: f64, dof: f64) -> f64 {
    if stat <= 0.0 {
        return 1.0;
    }
    let d = ChiSquared::new(dof).expect("positive dof");
    (1.0 - d.cdf(stat)).clamp(0.0, 1.0)
}

fn normal_sf2(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    (2.0 * (1.0 - n.cdf(z.abs()))).clamp(0.0, 1.0)
}

/// McNemar test on paired correctness indicators. Uses the discordant counts
/// b (A right, B wrong) and c (A wrong, B right): chi^2 = (b-c)^2/(b+c)
/// without continuity correction; exact two-sided binomial when b + c < 25.
pub fn mcnemar(a_correct: &[bool], b_correct: &[bool]) -> Result<TestResult> {
    if a_correct.len() != b_correct.len() || a_correct.is_empty() {
        return Err(CoreError::Data("paired outcomes must be nonempty and equal length".into()));
    }
    let b = a_correct.iter().zip(b_correct).filter(|(&a, &b)| a && !b).count() as f64;
    let c = a_correct.iter().zip(b_correct).filter(|(&a, &b)| !a && b).count() as f64;
    let n = a_correct.len() as f64;
    let estimate = (b - c) / n;
    if b + c == 0.0 {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
            estimate,
            method: Method::McnemarChiSquare,
            degenerate: false,
        });
    }
    if b + c < 25.0 {
        let dist = Binomial::new(0.5, (b + c) as u64).unwrap();
        let k = b.min(c) as u64;
        let p = (2.0 * dist.cdf(k)).min(1.0);
        return Ok(TestResult {
            statistic: (b - c).powi(2) / (b + c),
            p_value: p,
            estimate,
            method: Method::McnemarExact,
            degenerate: false,
        });
    }
    let stat = (b - c).powi(2) / (b + c);
    Ok(TestResult {
        statistic: stat,
        p_value: chi2_sf(stat, 1.0),
        estimate,
        method: Method::McnemarChiSquare,
        degenerate: false,
    })
}

/// Generalized score statistic for comparing paired proportions on a common
/// case subset. With per-case differences d_i = y_Ai - y_Bi the score test
/// of zero mean difference is (sum d)^2 / (sum d^2), referred to chi^2_1.
pub fn gss_paired_proportions(a_success: &[bool], b_success: &[bool]) -> Result<TestResult> {
    if a_success.len() != b_success.len() || a_success.is_empty() {
        return Err(CoreError::Data("comparison subset is empty or mismatched".into()));
    }
    let d: Vec<f64> = a_success
        .iter()
        .zip(b_success)
        .map(|(&a, &b)| f64::from(a) - f64::from(b))
        .collect();
    let sum: f64 = d.iter().sum();
    let ss: f64 = d.iter().map(|v| v * v).sum();
    let n = d.len() as f64;
    let estimate = sum / n;
    if ss == 0.0 {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
            estimate,
            method: Method::GeneralizedScore,
            degenerate: false,
        });
    }
    let stat = sum * sum / ss;
    Ok(TestResult {
        statistic: stat,
        p_value: chi2_sf(stat, 1.0),
        estimate,
        method: Method::GeneralizedScore,
        degenerate: false,
    })
}

/// Midranks of a sample (average rank for ties, 1-based).
fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Structural components of one score set: the AUC plus per-case V10/V01
/// vectors, computed via midranks.
fn delong_components(scores: &[f64], labels: &[usize]) -> (f64, Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let all: Vec<f64> = pos.iter().chain(neg.iter()).copied().collect();
    let rank_all = midranks(&all);
    let rank_pos = midranks(&pos);
    let rank_neg = midranks(&neg);
    let v10: Vec<f64> = (0..pos.len())
        .map(|i| (rank_all[i] - rank_pos[i]) / n)
        .collect();
    let v01: Vec<f64> = (0..neg.len())
        .map(|j| 1.0 - (rank_all[pos.len() + j] - rank_neg[j]) / m)
        .collect();
    let auc = v10.iter().sum::<f64>() / m;
    (auc, v10, v01)
}

fn sample_cov(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0)
}

/// DeLong test for two correlated AUCs measured on the same cases.
pub fn delong(scores_a: &[f64], scores_b: &[f64], labels: &[usize]) -> Result<TestResult> {
    if scores_a.len() != labels.len() || scores_b.len() != labels.len() || labels.is_empty() {
        return Err(CoreError::Data("paired scores/labels mismatched".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(CoreError::Degenerate("both classes required".into()));
    }
    let (auc_a, v10_a, v01_a) = delong_components(scores_a, labels);
    let (auc_b, v10_b, v01_b) = delong_components(scores_b, labels);
    let diff = auc_a - auc_b;
    let m = v10_a.len() as f64;
    let n = v01_a.len() as f64;
    let var = (sample_cov(&v10_a, &v10_a) + sample_cov(&v10_b, &v10_b)
        - 2.0 * sample_cov(&v10_a, &v10_b))
        / m
        + (sample_cov(&v01_a, &v01_a) + sample_cov(&v01_b, &v01_b)
            - 2.0 * sample_cov(&v01_a, &v01_b))
            / n;
    if var <= 0.0 {
        // identical scores (or perfectly co-varying components)
        let degenerate = diff.abs() > 0.0;
        return Ok(TestResult {
            statistic: 0.0,
            p_value: if degenerate { f64::NAN } else { 1.0 },
            estimate: diff,
            method: Method::Delong,
            degenerate,
        });
    }
    let z = diff / var.sqrt();
    Ok(TestResult {
        statistic: z,
        p_value: normal_sf2(z),
        estimate: diff,
        method: Method::Delong,
        degenerate: false,
    })
}

/// AUCs as computed inside the DeLong machinery, for consistency checks
/// against `eval::roc_auc`.
pub fn delong_aucs(scores_a: &[f64], scores_b: &[f64], labels: &[usize]) -> (f64, f64) {
    let (a, _, _) = delong_components(scores_a, labels);
    let (b, _, _) = delong_components(scores_b, labels);
    (a, b)
}

/// Pearson chi-square test of independence on an r x k contingency table.
pub fn chi_square_independence(table: &[Vec<f64>]) -> Result<TestResult> {
    let r = table.len();
    if r < 2 || table[0].len() < 2 {
        return Err(CoreError::Data("contingency table must be at least 2x2".into()));
    }
    let k = table[0].len();
    if table.iter().any(|row| row.len() != k) {
        return Err(CoreError::Data("ragged contingency table".into()));
    }
    let row_sums: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..k).map(|j| table.iter().map(|row| row[j]).sum()).collect();
    let total: f64 = row_sums.iter().sum();
    if row_sums.iter().chain(col_sums.iter()).any(|&s| s <= 0.0) {
        return Err(CoreError::Degenerate("contingency table has a zero marginal".into()));
    }
    let mut stat = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let exp = row_sums[i] * col_sums[j] / total;
            stat += (obs - exp).powi(2) / exp;
        }
    }
    let dof = ((r - 1) * (k - 1)) as f64;
    Ok(TestResult {
        statistic: stat,
        p_value: chi2_sf(stat, dof),
        estimate: stat,
        method: Method::ChiSquareIndependence,
        degenerate: false,
    })
}

/// Mann-Whitney U test with normal approximation and tie correction.
pub fn mann_whitney(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.is_empty() || y.is_empty() {
        return Err(CoreError::Data("both samples must be nonempty".into()));
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let all: Vec<f64> = x.iter().chain(y.iter()).copied().collect();
    let ranks = midranks(&all);
    let rank_sum_x: f64 = ranks[..x.len()].iter().sum();
    let u = rank_sum_x - nx * (nx + 1.0) / 2.0;
    let mean = nx * ny / 2.0;
    // tie correction on the pooled sample
    let n = nx + ny;
    let mut sorted = all.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nx * ny / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(TestResult {
            statistic: u,
            p_value: 1.0,
            estimate: u - mean,
            method: Method::MannWhitney,
            degenerate: true,
        });
    }
    let z = (u - mean) / var.sqrt();
    Ok(TestResult {
        statistic: u,
        p_value: normal_sf2(z),
        estimate: u - mean,
        method: Method::MannWhitney,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::roc_auc;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mcnemar_identical_outcomes() {
        let a = vec![true, false, true, true];
        let r = mcnemar(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn mcnemar_chi_square_closed_form() {
        // b=5, c=1 -> chi^2 = 16/6; force the large-sample path by padding
        // concordant pairs (they do not change b or c)
        let mut a = vec![true; 30];
        let mut b = vec![true; 30];
        for i in 0..5 {
            b[i] = false; // A right, B wrong
        }
        a[5] = false; // A wrong, B right
        // discordant = 6 < 25 -> exact path; check the statistic anyway
        let r = mcnemar(&a, &b).unwrap();
        assert!((r.statistic - 16.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.method, Method::McnemarExact);
        // exact binomial oracle: 2*P(Bin(6,1/2) <= 1)
        let expect = 2.0 * (1.0 + 6.0) / 64.0;
        assert!((r.p_value - expect).abs() < 1e-12);
    }

    #[test]
    fn mcnemar_extreme_exact_binomial() {
        // b=0, c=10 -> p = 2*(1/2)^10
        let a = vec![false; 10];
        let b = vec![true; 10];
        let r = mcnemar(&a, &b).unwrap();
        assert!((r.p_value - 2.0 * 0.5f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn gss_identical_and_extreme() {
        let a = vec![true, false, true];
        let r = gss_paired_proportions(&a, &a).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        let r = gss_paired_proportions(&vec![true; 10], &vec![false; 10]).unwrap();
        assert!(r.p_value < 0.01, "p = {}", r.p_value);
    }

    #[test]
    fn delong_identical_scores() {
        let s = vec![0.1, 0.9, 0.4, 0.7, 0.2];
        let l = vec![0, 1, 0, 1, 0];
        let r = delong(&s, &s, &l).unwrap();
        assert_eq!(r.estimate, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(!r.degenerate);
    }

    #[test]
    fn delong_aucs_match_roc_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let n = rng.gen_range(6..40);
            let labels: Vec<usize> = (0..n).map(|i| usize::from(i % 2 == 0)).collect();
            let sa: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let sb: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
            let (a, b) = delong_aucs(&sa, &sb, &labels);
            assert!((a - roc_auc(&sa, &labels).unwrap().1).abs() < 1e-12);
            assert!((b - roc_auc(&sb, &labels).unwrap().1).abs() < 1e-12);
        }
    }

    #[test]
    fn delong_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let labels: Vec<usize> = (0..30).map(|i| usize::from(i % 3 == 0)).collect();
        let sa: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let sb: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ab = delong(&sa, &sb, &labels).unwrap();
        let ba = delong(&sb, &sa, &labels).unwrap();
        assert!((ab.estimate + ba.estimate).abs() < 1e-12);
        assert!((ab.p_value - ba.p_value).abs() < 1e-12);
    }

    #[test]
    fn chi_square_proportional_table_is_null() {
        let table = vec![vec![10.0, 20.0], vec![20.0, 40.0]];
        let r = chi_square_independence(&table).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn chi_square_hand_formula() {
        let table = vec![vec![10.0, 20.0], vec![20.0, 10.0]];
        // E = 15 everywhere; stat = 4 * 25/15 = 20/3
        let r = chi_square_independence(&table).unwrap();
        assert!((r.statistic - 20.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn chi_square_zero_marginal_errors() {
        let table = vec![vec![0.0, 0.0], vec![5.0, 5.0]];
        assert!(chi_square_independence(&table).is_err());
    }

    #[test]
    fn mann_whitney_complete_separation() {
        let r = mann_whitney(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!(r.p_value < 0.1);
    }

    #[test]
    fn swapping_sides_flips_estimate_preserves_p() {
        let a = vec![true, true, false, true, false, true];
        let b = vec![false, true, true, true, false, false];
        let ab = mcnemar(&a, &b).unwrap();
        let ba = mcnemar(&b, &a).unwrap();
        assert!((ab.estimate + ba.estimate).abs() < 1e-12);
        assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        let g_ab = gss_paired_proportions(&a, &b).unwrap();
        let g_ba = gss_paired_proportions(&b, &a).unwrap();
        assert!((g_ab.estimate + g_ba.estimate).abs() < 1e-12);
        assert!((g_ab.p_value - g_ba.p_value).abs() < 1e-12);
    }
}
