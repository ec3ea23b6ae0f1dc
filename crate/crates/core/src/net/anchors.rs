//! Anchor generation, IoU, non-maximum suppression, and box delta
//! encoding/decoding for the two-stage detector.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in continuous image coordinates (row0, col0, row1, col1),
/// min ≤ max per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub r0: f64,
    pub c0: f64,
    pub r1: f64,
    pub c1: f64,
}

impl Box2 {
    pub fn new(r0: f64, c0: f64, r1: f64, c1: f64) -> Self {
        Box2 { r0: r0.min(r1), c0: c0.min(c1), r1: r0.max(r1), c1: c0.max(c1) }
    }

    pub fn height(&self) -> f64 {
        self.r1 - self.r0
    }

    pub fn width(&self) -> f64 {
        self.c1 - self.c0
    }

    pub fn area(&self) -> f64 {
        self.height().max(0.0) * self.width().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.r0 + self.r1) / 2.0, (self.c0 + self.c1) / 2.0)
    }

    pub fn clip(&self, h: f64, w: f64) -> Box2 {
        Box2 {
            r0: self.r0.clamp(0.0, h),
            c0: self.c0.clamp(0.0, w),
            r1: self.r1.clamp(0.0, h),
            c1: self.c1.clamp(0.0, w),
        }
    }
}

/// Intersection-over-union of two boxes.
pub fn iou(a: &Box2, b: &Box2) -> f64 {
    let ir0 = a.r0.max(b.r0);
    let ic0 = a.c0.max(b.c0);
    let ir1 = a.r1.min(b.r1);
    let ic1 = a.c1.min(b.c1);
    let inter = (ir1 - ir0).max(0.0) * (ic1 - ic0).max(0.0);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Dense anchors for one feature level: one anchor per (cell, scale, ratio),
/// centred on the cell, in image coordinates. Scales are side lengths in
/// pixels; ratios are height/width.
pub fn generate_anchors(
    feat_h: usize,
    feat_w: usize,
    stride: usize,
    scales: &[f64],
    ratios: &[f64],
) -> Vec<Box2> {
    let mut anchors = Vec::with_capacity(feat_h * feat_w * scales.len() * ratios.len());
    for i in 0..feat_h {
        for j in 0..feat_w {
            let cr = (i as f64 + 0.5) * stride as f64;
            let cc = (j as f64 + 0.5) * stride as f64;
            for &s in scales {
                for &ratio in ratios {
                    let h = s * ratio.sqrt();
                    let w = s / ratio.sqrt();
                    anchors.push(Box2 {
                        r0: cr - h / 2.0,
                        c0: cc - w / 2.0,
                        r1: cr + h / 2.0,
                        c1: cc + w / 2.0,
                    });
                }
            }
        }
    }
    anchors
}

/// Greedy non-maximum suppression; returns indices into `boxes` of the kept
/// entries, highest score first.
pub fn nms(boxes: &[Box2], scores: &[f64], iou_thresh: f64, max_keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut keep = Vec::new();
    for &i in &order {
        if keep.len() >= max_keep {
            break;
        }
        if keep.iter().all(|&k: &usize| iou(&boxes[i], &boxes[k]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Encodes a target box relative to an anchor as (dr, dc, dh, dw).
pub fn encode_deltas(anchor: &Box2, target: &Box2) -> [f64; 4] {
    let (ar, ac) = anchor.center();
    let (tr, tc) = target.center();
    let (ah, aw) = (anchor.height().max(1e-6), anchor.width().max(1e-6));
    let (th, tw) = (target.height().max(1e-6), target.width().max(1e-6));
    [(tr - ar) / ah, (tc - ac) / aw, (th / ah).ln(), (tw / aw).ln()]
}

/// Inverse of [`encode_deltas`]; log-scales are clamped to keep decoded sizes
/// finite on untrained outputs.
pub fn decode_deltas(anchor: &Box2, deltas: &[f64; 4]) -> Box2 {
    let (ar, ac) = anchor.center();
    let (ah, aw) = (anchor.height().max(1e-6), anchor.width().max(1e-6));
    let cr = ar + deltas[0] * ah;
    let cc = ac + deltas[1] * aw;
    let h = ah * deltas[2].clamp(-4.0, 4.0).exp();
    let w = aw * deltas[3].clamp(-4.0, 4.0).exp();
    Box2 { r0: cr - h / 2.0, c0: cc - w / 2.0, r1: cr + h / 2.0, c1: cc + w / 2.0 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_known_values() {
        let a = Box2::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = Box2::new(1.0, 1.0, 3.0, 3.0); // 1x1 overlap, union 7
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        let c = Box2::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &c), 0.0);
    }

    #[test]
    fn anchors_cover_grid_with_expected_count() {
        let anchors = generate_anchors(4, 4, 8, &[16.0], &[0.5, 1.0, 2.0]);
        assert_eq!(anchors.len(), 4 * 4 * 3);
        // first cell centre at (4, 4); ratio 1 anchor is 16x16 around it
        let sq = &anchors[1];
        assert!((sq.r0 - (4.0 - 8.0)).abs() < 1e-12);
        assert!((sq.height() - 16.0).abs() < 1e-12);
        // ratio 0.5 anchor preserves area
        assert!((anchors[0].area() - 256.0).abs() < 1e-9);
    }

    #[test]
    fn nms_suppresses_overlaps_keeps_disjoint() {
        let boxes = vec![
            Box2::new(0.0, 0.0, 10.0, 10.0),
            Box2::new(1.0, 1.0, 11.0, 11.0), // heavy overlap with 0
            Box2::new(50.0, 50.0, 60.0, 60.0),
        ];
        let keep = nms(&boxes, &[0.9, 0.8, 0.7], 0.5, 10);
        assert_eq!(keep, vec![0, 2]);
        // max_keep truncates
        assert_eq!(nms(&boxes, &[0.9, 0.8, 0.7], 0.5, 1), vec![0]);
    }

    #[test]
    fn delta_encode_decode_roundtrip() {
        let anchor = Box2::new(10.0, 12.0, 26.0, 28.0);
        let target = Box2::new(8.0, 14.0, 30.0, 27.0);
        let deltas = encode_deltas(&anchor, &target);
        let back = decode_deltas(&anchor, &deltas);
        assert!((back.r0 - target.r0).abs() < 1e-9);
        assert!((back.c0 - target.c0).abs() < 1e-9);
        assert!((back.r1 - target.r1).abs() < 1e-9);
        assert!((back.c1 - target.c1).abs() < 1e-9);
        // identity target -> zero deltas
        let z = encode_deltas(&anchor, &anchor);
        assert!(z.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn clip_bounds_box() {
        let b = Box2::new(-5.0, 3.0, 70.0, 80.0).clip(64.0, 64.0);
        assert_eq!(b, Box2::new(0.0, 3.0, 64.0, 64.0));
    }
}
