//! Minimal self-contained SVG renderers for ROC/PR curves, confusion
//! heatmaps, and Kaplan-Meier step curves.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::survival::SurvivalCurve;

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn px(x: f64, xmax: f64) -> f64 {
    MARGIN + x / xmax * (W - 2.0 * MARGIN)
}

fn py(y: f64, ymax: f64) -> f64 {
    H - MARGIN - y / ymax * (H - 2.0 * MARGIN)
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = write!(
        s,
        r#"<rect width="{W}" height="{H}" fill="white"/><text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>"#,
        W / 2.0
    );
    s
}

fn axes(s: &mut String, xlabel: &str, ylabel: &str) {
    let _ = write!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    );
    let _ = write!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{xlabel}</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = write!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11" transform="rotate(-90 14 {})">{ylabel}</text>"#,
        H / 2.0,
        H / 2.0
    );
}

fn polyline(s: &mut String, pts: &[(f64, f64)], color: &str, xmax: f64, ymax: f64) {
    if pts.is_empty() {
        return;
    }
    let coords: Vec<String> =
        pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x, xmax), py(y, ymax))).collect();
    let _ = write!(
        s,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
        coords.join(" ")
    );
}

fn save(path: &Path, mut svg: String) -> Result<()> {
    svg.push_str("</svg>");
    std::fs::write(path, svg).map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// ROC curve with the chance diagonal.
pub fn roc_plot(path: &Path, points: &[(f64, f64)], auc: f64) -> Result<()> {
    let mut s = svg_open(&format!("ROC (AUROC = {auc:.3})"));
    axes(&mut s, "false positive rate", "true positive rate");
    polyline(
        &mut s,
        &[(0.0, 0.0), (1.0, 1.0)],
        "#bbbbbb",
        1.0,
        1.0,
    );
    polyline(&mut s, points, COLORS[0], 1.0, 1.0);
    save(path, s)
}

/// Precision-recall curve.
pub fn pr_plot(path: &Path, points: &[(f64, f64)], auprc: f64) -> Result<()> {
    let mut s = svg_open(&format!("Precision-Recall (AUPRC = {auprc:.3})"));
    axes(&mut s, "recall", "precision");
    polyline(&mut s, points, COLORS[1], 1.0, 1.0);
    save(path, s)
}

/// 2×3 confusion heatmap: rows = true classes, columns = {class0, class1, BG}.
pub fn confusion_plot(path: &Path, matrix: &[[usize; 3]; 2]) -> Result<()> {
    let mut s = svg_open("Confusion matrix");
    let max = matrix.iter().flatten().cloned().max().unwrap_or(1).max(1) as f64;
    let cell_w = (W - 2.0 * MARGIN) / 3.0;
    let cell_h = (H - 2.0 * MARGIN) / 2.0;
    let cols = ["class0", "class1", "BG"];
    let rows = ["true class0", "true class1"];
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let x = MARGIN + j as f64 * cell_w;
            let y = MARGIN + i as f64 * cell_h;
            let shade = 255 - (v as f64 / max * 160.0) as u8;
            let _ = write!(
                s,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{cell_w:.1}" height="{cell_h:.1}" fill="rgb({shade},{shade},255)" stroke="black"/>"#
            );
            let _ = write!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="13">{v}</text>"#,
                x + cell_w / 2.0,
                y + cell_h / 2.0
            );
        }
    }
    for (j, c) in cols.iter().enumerate() {
        let _ = write!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="11">{c}</text>"#,
            MARGIN + (j as f64 + 0.5) * cell_w,
            H - MARGIN + 16.0
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let _ = write!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{r}</text>"#,
            MARGIN - 4.0,
            MARGIN + (i as f64 + 0.5) * cell_h
        );
    }
    save(path, s)
}

/// Kaplan-Meier step curves with censor tick marks, one color per group.
pub fn km_plot(path: &Path, groups: &[(String, SurvivalCurve)]) -> Result<()> {
    let tmax = groups
        .iter()
        .flat_map(|(_, c)| c.times.iter().chain(c.censor_times.iter()))
        .cloned()
        .fold(1.0f64, f64::max);
    let mut s = svg_open("Overall survival");
    axes(&mut s, "time (months)", "survival probability");
    for (g, (name, curve)) in groups.iter().enumerate() {
        let color = COLORS[g % COLORS.len()];
        // step curve starting at S(0) = 1
        let mut pts = vec![(0.0, 1.0)];
        let mut last_s = 1.0;
        for (&t, &sv) in curve.times.iter().zip(&curve.survival) {
            pts.push((t, last_s));
            pts.push((t, sv));
            last_s = sv;
        }
        pts.push((tmax, last_s));
        polyline(&mut s, &pts, color, tmax, 1.0);
        // censor marks on the current step level
        for &ct in &curve.censor_times {
            let level = curve
                .times
                .iter()
                .zip(&curve.survival)
                .filter(|(&t, _)| t <= ct)
                .map(|(_, &sv)| sv)
                .last()
                .unwrap_or(1.0);
            let _ = write!(
                s,
                r#"<line x1="{x:.1}" y1="{y0:.1}" x2="{x:.1}" y2="{y1:.1}" stroke="{color}" stroke-width="1.5"/>"#,
                x = px(ct, tmax),
                y0 = py(level, 1.0) - 4.0,
                y1 = py(level, 1.0) + 4.0
            );
        }
        let _ = write!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" fill="{color}">{name}</text>"#,
            W - MARGIN - 120.0,
            MARGIN + 16.0 * (g as f64 + 1.0)
        );
    }
    save(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Event;
    use crate::survival::kaplan_meier;

    #[test]
    fn roc_and_pr_plots_are_valid_svg() {
        let dir = tempfile::tempdir().unwrap();
        let roc = dir.path().join("roc.svg");
        roc_plot(&roc, &[(0.0, 0.0), (0.2, 0.8), (1.0, 1.0)], 0.85).unwrap();
        let text = std::fs::read_to_string(&roc).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.ends_with("</svg>"));
        assert!(text.contains("0.850"));
        let pr = dir.path().join("pr.svg");
        pr_plot(&pr, &[(0.0, 1.0), (1.0, 0.5)], 0.75).unwrap();
        assert!(std::fs::read_to_string(&pr).unwrap().contains("Precision"));
    }

    #[test]
    fn confusion_plot_renders_all_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cm.svg");
        confusion_plot(&path, &[[10, 2, 1], [3, 12, 0]]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("<rect").count(), 7); // background + 6 cells
        assert!(text.contains(">BG<"));
    }

    #[test]
    fn km_plot_contains_groups_and_censor_marks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("km.svg");
        let c1 = kaplan_meier(
            &[2.0, 4.0, 6.0],
            &[Event::Observed, Event::Censored, Event::Observed],
        )
        .unwrap();
        let c2 = kaplan_meier(&[1.0, 3.0], &[Event::Observed, Event::Observed]).unwrap();
        km_plot(&path, &[("mut".into(), c1), ("wt".into(), c2)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains(">mut<"));
        assert!(text.contains(">wt<"));
        assert!(text.matches("<polyline").count() >= 2);
    }
}
