//! Detector losses: class-weighted softmax cross-entropy, smooth L1 box
//! regression, binary cross-entropy mask loss, and the weighted multi-task
//! bundle.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// The five task-loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub head_class: f64,
    pub head_box: f64,
    pub head_mask: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn components(&self) -> [f64; 5] {
        [self.rpn_objectness, self.rpn_box, self.head_class, self.head_box, self.head_mask]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|l| l.is_finite()) && self.total.is_finite()
    }
}

/// Assembles the bundle: total = Σ weight_i · component_i.
pub fn combine_losses(components: [f64; 5], weights: [f64; 5]) -> LossBundle {
    let total: f64 = components.iter().zip(weights).map(|(l, w)| w * l).sum();
    LossBundle {
        rpn_objectness: components[0],
        rpn_box: components[1],
        head_class: components[2],
        head_box: components[3],
        head_mask: components[4],
        total,
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Class-weighted softmax cross-entropy, mean-reduced over the batch:
/// L = (1/n) Σ_i w[t_i] · (−log softmax(logits_i)[t_i]).
/// Returns the loss and its gradient with respect to the logits.
pub fn class_weighted_ce(
    logits: &Array2<f64>,
    targets: &[usize],
    weights: &[f64],
) -> (f64, Array2<f64>) {
    assert_eq!(logits.nrows(), targets.len());
    assert_eq!(logits.ncols(), weights.len());
    assert!(weights.iter().all(|&w| w > 0.0), "class weights must be positive");
    let n = targets.len() as f64;
    let p = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = p.clone();
    for (i, &t) in targets.iter().enumerate() {
        let w = weights[t];
        loss += -w * p[[i, t]].max(1e-300).ln();
        for j in 0..logits.ncols() {
            let onehot = if j == t { 1.0 } else { 0.0 };
            grad[[i, j]] = w * (p[[i, j]] - onehot) / n;
        }
    }
    (loss / n, grad)
}

/// Smooth L1 (Huber with delta 1), mean-reduced over elements.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len());
    if pred.is_empty() {
        return (0.0, Vec::new());
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        if d.abs() < 1.0 {
            loss += 0.5 * d * d;
            grad.push(d / n);
        } else {
            loss += d.abs() - 0.5;
            grad.push(d.signum() / n);
        }
    }
    (loss / n, grad)
}

/// Binary cross-entropy on logits, mean-reduced; numerically stable form
/// max(x,0) − x·t + ln(1 + e^{−|x|}).
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), targets.len());
    if logits.is_empty() {
        return (0.0, Vec::new());
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &t) in logits.iter().zip(targets) {
        loss += x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln();
        let sig = 1.0 / (1.0 + (-x).exp());
        grad.push((sig - t) / n);
    }
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn unit_weights_reduce_to_plain_cross_entropy() {
        let logits = array![[0.3, -1.2, 0.7], [2.0, 0.1, -0.5]];
        let targets = [2usize, 0];
        let (lw, _) = class_weighted_ce(&logits, &targets, &[1.0, 1.0, 1.0]);
        // direct computation
        let mut expect = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row: Vec<f64> = logits.row(i).to_vec();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[t].exp() / z).ln();
        }
        expect /= 2.0;
        assert!((lw - expect).abs() < 1e-9);
    }

    #[test]
    fn weighted_ce_closed_form() {
        // logits (0,0,0), target 1, w = (1,2,1) -> 2 ln 3
        let logits = array![[0.0, 0.0, 0.0]];
        let (l, _) = class_weighted_ce(&logits, &[1], &[1.0, 2.0, 1.0]);
        assert!((l - 2.0 * 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weighted_ce_gradient_matches_central_differences() {
        let logits = array![[0.4, -0.9, 1.3], [-0.2, 0.8, 0.1], [2.2, -1.1, 0.0]];
        let targets = [1usize, 0, 2];
        let weights = [1.0, 2.5, 0.7];
        let (_, grad) = class_weighted_ce(&logits, &targets, &weights);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut lp = logits.clone();
                lp[[i, j]] += h;
                let mut lm = logits.clone();
                lm[[i, j]] -= h;
                let num = (class_weighted_ce(&lp, &targets, &weights).0
                    - class_weighted_ce(&lm, &targets, &weights).0)
                    / (2.0 * h);
                let rel = (grad[[i, j]] - num).abs() / num.abs().max(1e-8);
                assert!(rel <= 1e-4, "({i},{j}): {} vs {num}", grad[[i, j]]);
            }
        }
    }

    #[test]
    fn smooth_l1_piecewise_values() {
        // |d| < 1 quadratic, else linear
        let (l, g) = smooth_l1(&[0.5, 3.0], &[0.0, 0.0]);
        let expect = (0.5 * 0.25 + (3.0 - 0.5)) / 2.0;
        assert!((l - expect).abs() < 1e-12);
        assert!((g[0] - 0.25).abs() < 1e-12); // d/n = 0.5/2
        assert!((g[1] - 0.5).abs() < 1e-12); // sign/n
    }

    #[test]
    fn smooth_l1_gradient_matches_central_differences() {
        let pred = [0.3, -2.0, 0.9, 1.4];
        let target = [0.1, 0.0, 1.5, 1.2];
        let (_, g) = smooth_l1(&pred, &target);
        let h = 1e-6;
        for i in 0..pred.len() {
            let mut pp = pred;
            pp[i] += h;
            let mut pm = pred;
            pm[i] -= h;
            let num = (smooth_l1(&pp, &target).0 - smooth_l1(&pm, &target).0) / (2.0 * h);
            assert!((g[i] - num).abs() < 1e-6);
        }
    }

    #[test]
    fn bce_perfect_prediction_approaches_zero() {
        let (l, _) = bce_with_logits(&[20.0, -20.0], &[1.0, 0.0]);
        assert!(l < 1e-8);
        let (l2, _) = bce_with_logits(&[0.0], &[0.5]);
        assert!((l2 - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_gradient_matches_central_differences() {
        let logits = [0.7, -1.3, 2.1];
        let targets = [1.0, 0.0, 1.0];
        let (_, g) = bce_with_logits(&logits, &targets);
        let h = 1e-6;
        for i in 0..3 {
            let mut lp = logits;
            lp[i] += h;
            let mut lm = logits;
            lm[i] -= h;
            let num =
                (bce_with_logits(&lp, &targets).0 - bce_with_logits(&lm, &targets).0) / (2.0 * h);
            assert!((g[i] - num).abs() < 1e-6);
        }
    }

    #[test]
    fn bundle_total_is_weighted_sum_and_linear() {
        let comps = [0.5, 0.25, 1.5, 0.1, 0.7];
        let b = combine_losses(comps, [1.0; 5]);
        assert!((b.total - comps.iter().sum::<f64>()).abs() < 1e-12);
        // doubling the head_class weight doubles its contribution exactly
        let b2 = combine_losses(comps, [1.0, 1.0, 2.0, 1.0, 1.0]);
        assert_eq!(b2.total - b.total, comps[2]);
        assert!(b.is_finite());
    }
}
