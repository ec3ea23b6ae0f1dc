//! Kaplan-Meier estimation, binary-covariate Cox regression, and WHO-2016
//! subtype mapping.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::cohort::{CodelStatus, Event, Grade, IdhStatus};
use crate::error::{CoreError, Result};

/// Kaplan-Meier product-limit curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    /// S(t) just after each event time; non-increasing, starts below S(0)=1.
    pub survival: Vec<f64>,
    /// Risk-set size just before each event time.
    pub at_risk: Vec<usize>,
    /// Censoring times (for plot marks).
    pub censor_times: Vec<f64>,
    /// Smallest t with S(t) <= 0.5, if the curve reaches it.
    pub median: Option<f64>,
}

/// Product-limit estimator. Censored cases reduce the risk set only.
pub fn kaplan_meier(times: &[f64], events: &[Event]) -> Result<SurvivalCurve> {
    if times.is_empty() || times.len() != events.len() {
        return Err(CoreError::Data("empty or mismatched survival input".into()));
    }
    if times.iter().any(|&t| !(t >= 0.0)) {
        return Err(CoreError::Data("survival times must be >= 0".into()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());
    let n = times.len();
    let mut s = 1.0;
    let mut curve_times = Vec::new();
    let mut survival = Vec::new();
    let mut at_risk_out = Vec::new();
    let mut censor_times = Vec::new();
    let mut median = None;
    let mut i = 0;
    let mut removed = 0usize;
    while i < n {
        let t = times[order[i]];
        let mut deaths = 0usize;
        let mut censored = 0usize;
        let at_risk = n - removed;
        while i < n && times[order[i]] == t {
            match events[order[i]] {
                Event::Observed => deaths += 1,
                Event::Censored => censored += 1,
            }
            removed += 1;
            i += 1;
        }
        if censored > 0 {
            censor_times.push(t);
        }
        if deaths > 0 {
            s *= (at_risk - deaths) as f64 / at_risk as f64;
            curve_times.push(t);
            survival.push(s);
            at_risk_out.push(at_risk);
            if median.is_none() && s <= 0.5 {
                median = Some(t);
            }
        }
    }
    Ok(SurvivalCurve {
        times: curve_times,
        survival,
        at_risk: at_risk_out,
        censor_times,
        median,
    })
}

/// Tie handling for the Cox partial likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieMethod {
    Breslow,
    Efron,
}

/// Binary-covariate Cox proportional-hazards fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub beta: f64,
    pub se: f64,
    pub hazard_ratio: f64,
    pub wald_p: f64,
    /// Score test at beta = 0 (log-rank-equivalent on untied data).
    pub score_statistic: f64,
    pub score_p: f64,
    pub converged: bool,
}

struct EventBlock {
    deaths: usize,
    /// Sum of covariates over the deaths at this time.
    death_x_sum: f64,
    /// Risk set sizes: (count with x=1, count with x=0).
    risk1: usize,
    risk0: usize,
}

fn event_blocks(times: &[f64], events: &[Event], group: &[u8]) -> Vec<EventBlock> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());
    let n = times.len();
    let mut blocks = Vec::new();
    let total1 = group.iter().filter(|&&g| g == 1).count();
    let mut removed1 = 0usize;
    let mut removed = 0usize;
    let mut i = 0;
    while i < n {
        let t = times[order[i]];
        let (risk1, risk0) = (total1 - removed1, (n - removed) - (total1 - removed1));
        let mut deaths = 0usize;
        let mut death_x_sum = 0.0;
        while i < n && times[order[i]] == t {
            let idx = order[i];
            if events[idx] == Event::Observed {
                deaths += 1;
                death_x_sum += f64::from(group[idx]);
            }
            if group[idx] == 1 {
                removed1 += 1;
            }
            removed += 1;
            i += 1;
        }
        if deaths > 0 {
            blocks.push(EventBlock { deaths, death_x_sum, risk1, risk0 });
        }
    }
    blocks
}

/// Partial-likelihood score U(beta) and information I(beta).
fn score_info(blocks: &[EventBlock], beta: f64, ties: TieMethod) -> (f64, f64) {
    let e = beta.exp();
    let mut u = 0.0;
    let mut info = 0.0;
    for b in blocks {
        let d = b.deaths as f64;
        match ties {
            TieMethod::Breslow => {
                let s0 = b.risk1 as f64 * e + b.risk0 as f64;
                let s1 = b.risk1 as f64 * e;
                let mu = s1 / s0;
                u += b.death_x_sum - d * mu;
                info += d * mu * (1.0 - mu);
            }
            TieMethod::Efron => {
                // the tied deaths are progressively down-weighted out of the
                // risk set: S_k = S0 - (k/d) * S0_deaths
                let s0 = b.risk1 as f64 * e + b.risk0 as f64;
                let s1 = b.risk1 as f64 * e;
                let s0d = b.death_x_sum * e + (d - b.death_x_sum);
                let s1d = b.death_x_sum * e;
                for k in 0..b.deaths {
                    let f = k as f64 / d;
                    let den0 = s0 - f * s0d;
                    let den1 = s1 - f * s1d;
                    let mu = den1 / den0;
                    u += b.death_x_sum / d - mu;
                    info += mu * (1.0 - mu);
                }
            }
        }
    }
    (u, info)
}

/// Newton iteration on the partial likelihood for a single binary covariate.
/// Monotone likelihood (complete separation of event order) is flagged via
/// `converged = false` with a directional estimate.
pub fn cox_binary(times: &[f64], events: &[Event], group: &[u8], ties: TieMethod) -> Result<CoxFit> {
    if times.len() != events.len() || times.len() != group.len() || times.is_empty() {
        return Err(CoreError::Data("mismatched survival inputs".into()));
    }
    if group.iter().any(|&g| g > 1) {
        return Err(CoreError::Data("group must be binary".into()));
    }
    for g in [0u8, 1u8] {
        let has_event = times
            .iter()
            .zip(events)
            .zip(group)
            .any(|((_, &e), &gi)| gi == g && e == Event::Observed);
        if !has_event {
            return Err(CoreError::Degenerate(format!(
                "group {g} has no observed events"
            )));
        }
    }
    let blocks = event_blocks(times, events, group);
    let (u0, i0) = score_info(&blocks, 0.0, ties);
    let score_statistic = if i0 > 0.0 { u0 * u0 / i0 } else { 0.0 };
    let chi = ChiSquared::new(1.0).unwrap();
    let score_p = (1.0 - chi.cdf(score_statistic)).clamp(0.0, 1.0);

    let mut beta = 0.0;
    let mut converged = false;
    let mut info = i0.max(1e-12);
    for _ in 0..50 {
        let (u, i) = score_info(&blocks, beta, ties);
        info = i;
        if i <= 1e-12 {
            break;
        }
        let step = (u / i).clamp(-2.0, 2.0);
        beta += step;
        if step.abs() < 1e-10 {
            converged = true;
            break;
        }
        if beta.abs() > 20.0 {
            break; // monotone likelihood
        }
    }
    let se = if info > 0.0 { (1.0 / info).sqrt() } else { f64::INFINITY };
    let z = beta / se;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let wald_p = (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0);
    Ok(CoxFit {
        beta,
        se,
        hazard_ratio: beta.exp(),
        wald_p,
        score_statistic,
        score_p,
        converged,
    })
}

/// WHO 2016 integrated glioma subtypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtype {
    Oligodendroglioma,
    IdhMutAstrocytoma,
    IdhWtAstrocytoma,
    IdhMutGlioblastoma,
    IdhWtGlioblastoma,
}

impl Subtype {
    pub fn name(self) -> &'static str {
        match self {
            Subtype::Oligodendroglioma => "oligodendroglioma",
            Subtype::IdhMutAstrocytoma => "IDH-mut astrocytoma",
            Subtype::IdhWtAstrocytoma => "IDH-wt astrocytoma",
            Subtype::IdhMutGlioblastoma => "IDH-mut glioblastoma",
            Subtype::IdhWtGlioblastoma => "IDH-wt glioblastoma",
        }
    }
}

/// WHO-2016 subtype rules. Grade IV needs only the IDH marker; grades II/III
/// need both markers. Everything else is unclassifiable.
pub fn who2016_subtype(idh: IdhStatus, codel: CodelStatus, grade: Grade) -> Option<Subtype> {
    match (grade, idh, codel) {
        (Grade::IV, IdhStatus::Mutant, _) => Some(Subtype::IdhMutGlioblastoma),
        (Grade::IV, IdhStatus::Wildtype, _) => Some(Subtype::IdhWtGlioblastoma),
        (Grade::II | Grade::III, IdhStatus::Mutant, CodelStatus::Codeleted) => {
            Some(Subtype::Oligodendroglioma)
        }
        (Grade::II | Grade::III, IdhStatus::Mutant, CodelStatus::NonCodeleted) => {
            Some(Subtype::IdhMutAstrocytoma)
        }
        (Grade::II | Grade::III, IdhStatus::Wildtype, CodelStatus::NonCodeleted) => {
            Some(Subtype::IdhWtAstrocytoma)
        }
        _ => None,
    }
}

/// Per-group KM curves plus pairwise Cox fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupComparison {
    pub groups: Vec<(String, SurvivalCurve)>,
    /// (group_a, group_b, fit); `None` when a group lacks observed events.
    pub pairwise: Vec<(String, String, Option<CoxFit>)>,
}

/// Compare overall survival across named groups: one KM curve per group and
/// a Cox fit per group pair. Groups without events still get a KM curve but
/// their Cox fits are flagged as `None`.
pub fn compare_groups(groups: &[(String, Vec<(f64, Event)>)]) -> Result<GroupComparison> {
    let mut curves = Vec::new();
    for (name, data) in groups {
        if data.is_empty() {
            return Err(CoreError::Data(format!("group '{name}' is empty")));
        }
        let times: Vec<f64> = data.iter().map(|(t, _)| *t).collect();
        let events: Vec<Event> = data.iter().map(|(_, e)| *e).collect();
        curves.push((name.clone(), kaplan_meier(&times, &events)?));
    }
    let mut pairwise = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let (na, da) = &groups[i];
            let (nb, db) = &groups[j];
            let times: Vec<f64> = da.iter().chain(db.iter()).map(|(t, _)| *t).collect();
            let events: Vec<Event> = da.iter().chain(db.iter()).map(|(_, e)| *e).collect();
            let group: Vec<u8> = da
                .iter()
                .map(|_| 0u8)
                .chain(db.iter().map(|_| 1u8))
                .collect();
            let fit = cox_binary(&times, &events, &group, TieMethod::Breslow).ok();
            pairwise.push((na.clone(), nb.clone(), fit));
        }
    }
    Ok(GroupComparison { groups: curves, pairwise })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn km_all_observed_hand_fixture() {
        let curve = kaplan_meier(&[1.0, 2.0, 3.0], &[Event::Observed; 3]).unwrap();
        assert_eq!(curve.times, vec![1.0, 2.0, 3.0]);
        let expected = [2.0 / 3.0, 1.0 / 3.0, 0.0];
        for (s, e) in curve.survival.iter().zip(expected) {
            assert_eq!(*s, e);
        }
        assert_eq!(curve.median, Some(2.0));
        assert_eq!(curve.at_risk, vec![3, 2, 1]);
    }

    #[test]
    fn km_with_censoring_hand_fixture() {
        let curve = kaplan_meier(
            &[1.0, 2.0, 3.0],
            &[Event::Observed, Event::Censored, Event::Observed],
        )
        .unwrap();
        // S(1) = 2/3; at t=3 risk set is 1 -> S(3) = 2/3 * 0 = 0
        assert_eq!(curve.times, vec![1.0, 3.0]);
        assert_eq!(curve.survival[0], 2.0 / 3.0);
        assert_eq!(curve.survival[1], 0.0);
        assert_eq!(curve.censor_times, vec![2.0]);
    }

    #[test]
    fn km_all_censored_has_no_median() {
        let curve = kaplan_meier(&[1.0, 2.0], &[Event::Censored; 2]).unwrap();
        assert!(curve.times.is_empty());
        assert_eq!(curve.median, None);
    }

    fn logrank_chi2(times: &[f64], events: &[Event], group: &[u8]) -> f64 {
        // textbook log-rank: sum over event times of (O1 - E1), variance by
        // the hypergeometric formula
        let mut distinct: Vec<f64> = times
            .iter()
            .zip(events)
            .filter(|(_, &e)| e == Event::Observed)
            .map(|(&t, _)| t)
            .collect();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        let (mut o_minus_e, mut var) = (0.0, 0.0);
        for &t in &distinct {
            let at_risk: Vec<usize> = (0..times.len()).filter(|&i| times[i] >= t).collect();
            let n = at_risk.len() as f64;
            let n1 = at_risk.iter().filter(|&&i| group[i] == 1).count() as f64;
            let deaths: Vec<usize> = at_risk
                .iter()
                .copied()
                .filter(|&i| times[i] == t && events[i] == Event::Observed)
                .collect();
            let d = deaths.len() as f64;
            let d1 = deaths.iter().filter(|&&i| group[i] == 1).count() as f64;
            o_minus_e += d1 - d * n1 / n;
            if n > 1.0 {
                var += d * (n1 / n) * (1.0 - n1 / n) * (n - d) / (n - 1.0);
            }
        }
        o_minus_e * o_minus_e / var
    }

    #[test]
    fn cox_score_test_equals_logrank_on_untied_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..10 {
            let n = 30;
            let times: Vec<f64> = (0..n).map(|i| i as f64 + rng.gen_range(0.0..0.5)).collect();
            let events: Vec<Event> = (0..n)
                .map(|_| if rng.gen_bool(0.8) { Event::Observed } else { Event::Censored })
                .collect();
            let group: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
            if !(group.iter().any(|&g| g == 0) && group.iter().any(|&g| g == 1)) {
                continue;
            }
            let fit = match cox_binary(&times, &events, &group, TieMethod::Breslow) {
                Ok(f) => f,
                Err(_) => continue,
            };
            let lr = logrank_chi2(&times, &events, &group);
            assert!(
                (fit.score_statistic - lr).abs() < 1e-6,
                "trial {trial}: score {} vs logrank {lr}",
                fit.score_statistic
            );
        }
    }

    #[test]
    fn cox_group_swap_flips_beta() {
        let times = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let events = [Event::Observed; 8];
        let group = [0u8, 0, 0, 0, 1, 1, 1, 1];
        let flipped: Vec<u8> = group.iter().map(|&g| 1 - g).collect();
        let a = cox_binary(&times, &events, &group, TieMethod::Breslow).unwrap();
        let b = cox_binary(&times, &events, &flipped, TieMethod::Breslow).unwrap();
        assert!((a.beta + b.beta).abs() < 1e-8);
    }

    #[test]
    fn cox_recovers_planted_hazard_ratio() {
        use rand_distr::{Distribution, Exp};
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 500;
        let mut times = Vec::new();
        let mut events = Vec::new();
        let mut group = Vec::new();
        for i in 0..n {
            let g = u8::from(i % 2 == 0);
            let rate = if g == 1 { 3.0 } else { 1.0 };
            times.push(Exp::new(rate).unwrap().sample(&mut rng));
            events.push(Event::Observed);
            group.push(g);
        }
        let fit = cox_binary(&times, &events, &group, TieMethod::Breslow).unwrap();
        assert!(fit.converged);
        assert!(
            fit.hazard_ratio > 2.2 && fit.hazard_ratio < 4.0,
            "HR = {}",
            fit.hazard_ratio
        );
    }

    #[test]
    fn cox_time_unit_invariance() {
        let times = [3.0, 1.0, 4.0, 1.5, 9.0, 2.6, 5.3, 5.8];
        let events = [
            Event::Observed,
            Event::Observed,
            Event::Censored,
            Event::Observed,
            Event::Observed,
            Event::Observed,
            Event::Censored,
            Event::Observed,
        ];
        let group = [1u8, 0, 1, 0, 1, 0, 1, 0];
        let a = cox_binary(&times, &events, &group, TieMethod::Breslow).unwrap();
        let scaled: Vec<f64> = times.iter().map(|t| t * 30.44).collect();
        let b = cox_binary(&scaled, &events, &group, TieMethod::Breslow).unwrap();
        assert!((a.beta - b.beta).abs() < 1e-9);
        assert!((a.wald_p - b.wald_p).abs() < 1e-9);
    }

    #[test]
    fn who2016_rule_table() {
        use CodelStatus::*;
        use Grade::*;
        use IdhStatus::*;
        assert_eq!(who2016_subtype(Mutant, Codeleted, II), Some(Subtype::Oligodendroglioma));
        assert_eq!(who2016_subtype(Mutant, NonCodeleted, III), Some(Subtype::IdhMutAstrocytoma));
        assert_eq!(who2016_subtype(Wildtype, NonCodeleted, II), Some(Subtype::IdhWtAstrocytoma));
        assert_eq!(who2016_subtype(Mutant, CodelStatus::Unknown, IV), Some(Subtype::IdhMutGlioblastoma));
        assert_eq!(who2016_subtype(Wildtype, Codeleted, IV), Some(Subtype::IdhWtGlioblastoma));
        // unclassifiable cells
        assert_eq!(who2016_subtype(Wildtype, Codeleted, II), None);
        assert_eq!(who2016_subtype(IdhStatus::Unknown, Codeleted, II), None);
        assert_eq!(who2016_subtype(Mutant, CodelStatus::Unknown, II), None);
        assert_eq!(who2016_subtype(Mutant, Codeleted, Grade::Unknown), None);
    }

    #[test]
    fn who2016_total_over_label_grid() {
        // every cell either classifies or is a declared unclassifiable cell
        for idh in [IdhStatus::Mutant, IdhStatus::Wildtype, IdhStatus::Unknown] {
            for codel in [CodelStatus::Codeleted, CodelStatus::NonCodeleted, CodelStatus::Unknown] {
                for grade in [Grade::II, Grade::III, Grade::IV, Grade::Unknown] {
                    let s = who2016_subtype(idh, codel, grade);
                    let classifiable = match (grade, idh, codel) {
                        (Grade::IV, IdhStatus::Mutant | IdhStatus::Wildtype, _) => true,
                        (Grade::II | Grade::III, IdhStatus::Mutant, CodelStatus::Codeleted)
                        | (Grade::II | Grade::III, IdhStatus::Mutant, CodelStatus::NonCodeleted)
                        | (Grade::II | Grade::III, IdhStatus::Wildtype, CodelStatus::NonCodeleted) => {
                            true
                        }
                        _ => false,
                    };
                    assert_eq!(s.is_some(), classifiable, "{idh:?} {codel:?} {grade:?}");
                }
            }
        }
    }

    #[test]
    fn compare_groups_identical_gives_p_one() {
        let data: Vec<(f64, Event)> = (1..=10).map(|i| (i as f64, Event::Observed)).collect();
        let cmp = compare_groups(&[("gt".into(), data.clone()), ("pred".into(), data)]).unwrap();
        assert_eq!(cmp.groups[0].1, cmp.groups[1].1);
        let fit = cmp.pairwise[0].2.unwrap();
        assert!((fit.beta).abs() < 1e-6);
        assert!(fit.wald_p > 0.99);
    }

    #[test]
    fn single_case_group_km_defined_cox_flagged() {
        let a: Vec<(f64, Event)> = vec![(5.0, Event::Censored)];
        let b: Vec<(f64, Event)> = (1..=5).map(|i| (i as f64, Event::Observed)).collect();
        let cmp = compare_groups(&[("a".into(), a), ("b".into(), b)]).unwrap();
        assert!(cmp.groups[0].1.times.is_empty());
        assert!(cmp.pairwise[0].2.is_none()); // group a has no events
    }
}
