//! The two-stage detector: residual backbone, feature pyramid, region
//! proposal network, ROI-aligned detection/classification head with prior
//! fusion, and mask head — with hand-written forward and backward passes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView3, ArrayViewMut3, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::anchors::{decode_deltas, encode_deltas, generate_anchors, iou, nms, Box2};
use super::layers::{
    upsample2x, upsample2x_backward, BatchNorm2d, Conv2d, Linear, Param, Relu,
};
use super::loss::{
    bce_with_logits, class_weighted_ce, combine_losses, smooth_l1, softmax_rows, LossBundle,
};
use super::{fuse_priors, Detection, FusionMode, ModelConfig};
use crate::cohort::Task;
use crate::error::{CoreError, Result};
use crate::preprocess::{FeatureStats, PriorFeatures};
use crate::rng::rng_for;
use crate::slicing::{BBox, TrainingSample};

/// Which parameter groups a training step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainStage {
    /// Stage 1: RPN and heads only; the backbone is frozen (eval mode, no
    /// gradient, no running-statistic updates).
    HeadsOnly,
    /// Stage 2: the entire network.
    Full,
}

// ---------------------------------------------------------------------------
// backbone

/// Convolution + batch norm, optionally followed by ReLU.
#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: Option<Relu>,
}

impl ConvBn {
    fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        relu: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, k, stride, false, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
            relu: relu.then(Relu::default),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let y = self.conv.forward(x, train);
        let y = self.bn.forward(&y, train);
        match &mut self.relu {
            Some(r) => r.forward_4d(&y, train),
            None => y,
        }
    }

    fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let g = match &mut self.relu {
            Some(r) => r.backward_4d(gy),
            None => gy.clone(),
        };
        self.conv.backward(&self.bn.backward(&g))
    }

    fn params(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p
    }
}

/// Residual basic block: two 3×3 convolutions with an identity or projected
/// skip connection.
#[derive(Debug, Clone)]
struct BasicBlock {
    cb1: ConvBn,
    cb2: ConvBn,
    down: Option<ConvBn>,
    relu: Relu,
}

impl BasicBlock {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let down = (stride != 1 || cin != cout)
            .then(|| ConvBn::new(&format!("{name}.down"), cin, cout, 1, stride, false, rng));
        BasicBlock {
            cb1: ConvBn::new(&format!("{name}.c1"), cin, cout, 3, stride, true, rng),
            cb2: ConvBn::new(&format!("{name}.c2"), cout, cout, 3, 1, false, rng),
            down,
            relu: Relu::default(),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let h = self.cb1.forward(x, train);
        let h = self.cb2.forward(&h, train);
        let skip = match &mut self.down {
            Some(d) => d.forward(x, train),
            None => x.clone(),
        };
        self.relu.forward_4d(&(h + skip), train)
    }

    fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let g = self.relu.backward_4d(gy);
        let gmain = self.cb1.backward(&self.cb2.backward(&g));
        let gskip = match &mut self.down {
            Some(d) => d.backward(&g),
            None => g,
        };
        gmain + gskip
    }

    fn params(&mut self) -> Vec<&mut Param> {
        let mut p = self.cb1.params();
        p.extend(self.cb2.params());
        if let Some(d) = &mut self.down {
            p.extend(d.params());
        }
        p
    }
}

#[derive(Debug, Clone)]
struct Backbone {
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
}

impl Backbone {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let stem = ConvBn::new("backbone.stem", cfg.input_channels, cfg.stem_channels, 3, 1, true, rng);
        let mut stages = Vec::new();
        let mut cin = cfg.stem_channels;
        for (si, (&cout, &nblocks)) in
            cfg.stage_channels.iter().zip(&cfg.blocks_per_stage).enumerate()
        {
            let mut blocks = Vec::new();
            for bi in 0..nblocks {
                let stride = if bi == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    &format!("backbone.s{si}.b{bi}"),
                    cin,
                    cout,
                    stride,
                    rng,
                ));
                cin = cout;
            }
            stages.push(blocks);
        }
        Backbone { stem, stages }
    }

    /// Returns each stage's output feature map.
    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Vec<Array4<f64>> {
        let mut h = self.stem.forward(x, train);
        let mut outs = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            for block in stage {
                h = block.forward(&h, train);
            }
            outs.push(h.clone());
        }
        outs
    }

    fn backward(&mut self, gouts: Vec<Array4<f64>>) {
        let n = self.stages.len();
        let mut g = gouts[n - 1].clone();
        for i in (0..n).rev() {
            for block in self.stages[i].iter_mut().rev() {
                g = block.backward(&g);
            }
            if i > 0 {
                g = g + &gouts[i - 1];
            }
        }
        self.stem.backward(&g);
    }

    fn params(&mut self) -> Vec<&mut Param> {
        let mut p = self.stem.params();
        for stage in &mut self.stages {
            for block in stage {
                p.extend(block.params());
            }
        }
        p
    }

    fn bns(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut v = vec![&mut self.stem.bn];
        for stage in &mut self.stages {
            for block in stage {
                v.push(&mut block.cb1.bn);
                v.push(&mut block.cb2.bn);
                if let Some(d) = &mut block.down {
                    v.push(&mut d.bn);
                }
            }
        }
        v
    }
}

// ---------------------------------------------------------------------------
// feature pyramid

#[derive(Debug, Clone)]
struct Fpn {
    laterals: Vec<Conv2d>,
    smooths: Vec<Conv2d>,
}

impl Fpn {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let laterals = cfg
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(&format!("fpn.lat{i}"), c, cfg.fpn_channels, 1, 1, true, rng))
            .collect();
        let smooths = (0..cfg.stage_channels.len())
            .map(|i| {
                Conv2d::new(&format!("fpn.smooth{i}"), cfg.fpn_channels, cfg.fpn_channels, 3, 1, true, rng)
            })
            .collect();
        Fpn { laterals, smooths }
    }

    fn forward(&mut self, c: &[Array4<f64>], train: bool) -> Vec<Array4<f64>> {
        let n = c.len();
        let mut t: Vec<Array4<f64>> = Vec::with_capacity(n);
        for (i, ci) in c.iter().enumerate() {
            t.push(self.laterals[i].forward(ci, train));
        }
        for i in (0..n - 1).rev() {
            let up = upsample2x(&t[i + 1]);
            t[i] = &t[i] + &up;
        }
        t.iter().enumerate().map(|(i, ti)| self.smooths[i].forward(ti, train)).collect()
    }

    fn backward(&mut self, gp: Vec<Array4<f64>>) -> Vec<Array4<f64>> {
        let n = gp.len();
        let mut gt: Vec<Array4<f64>> =
            gp.iter().enumerate().map(|(i, g)| self.smooths[i].backward(g)).collect();
        for i in 0..n - 1 {
            let extra = upsample2x_backward(&gt[i]);
            gt[i + 1] = &gt[i + 1] + &extra;
        }
        gt.iter().enumerate().map(|(i, g)| self.laterals[i].backward(g)).collect()
    }

    fn params(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        for l in &mut self.laterals {
            p.extend(l.params());
        }
        for sm in &mut self.smooths {
            p.extend(sm.params());
        }
        p
    }
}

// ---------------------------------------------------------------------------
// region proposal network

#[derive(Debug, Clone)]
struct Rpn {
    conv: Conv2d,
    relu: Relu,
    obj: Conv2d,
    boxr: Conv2d,
}

impl Rpn {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let a = cfg.anchor_scales.len() * cfg.anchor_ratios.len();
        let c = cfg.fpn_channels;
        Rpn {
            conv: Conv2d::new("rpn.conv", c, c, 3, 1, true, rng),
            relu: Relu::default(),
            obj: Conv2d::new("rpn.obj", c, a, 1, 1, true, rng),
            boxr: Conv2d::new("rpn.box", c, 4 * a, 1, 1, true, rng),
        }
    }

    fn forward(&mut self, p: &Array4<f64>, train: bool) -> (Array4<f64>, Array4<f64>) {
        let h = self.relu.forward_4d(&self.conv.forward(p, train), train);
        (self.obj.forward(&h, train), self.boxr.forward(&h, train))
    }

    fn backward(&mut self, gobj: &Array4<f64>, gboxd: &Array4<f64>) -> Array4<f64> {
        let gh = self.obj.backward(gobj) + self.boxr.backward(gboxd);
        self.conv.backward(&self.relu.backward_4d(&gh))
    }

    fn params(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv.params();
        p.extend(self.obj.params());
        p.extend(self.boxr.params());
        p
    }
}

// ---------------------------------------------------------------------------
// ROI align

fn bilinear_weights(fr: f64, fc: f64, h: usize, w: usize) -> [(usize, usize, f64); 4] {
    let r0 = fr.floor() as usize;
    let c0 = fc.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let dr = fr - r0 as f64;
    let dc = fc - c0 as f64;
    [
        (r0, c0, (1.0 - dr) * (1.0 - dc)),
        (r0, c1, (1.0 - dr) * dc),
        (r1, c0, dr * (1.0 - dc)),
        (r1, c1, dr * dc),
    ]
}

/// Bilinear sample coordinates of output cell (i, j) for box `bx` on a
/// feature map with the given stride; clamped to the map.
fn roi_cell_coords(
    bx: &Box2,
    out: usize,
    stride: f64,
    h: usize,
    w: usize,
    i: usize,
    j: usize,
) -> (f64, f64) {
    let r = bx.r0 + (i as f64 + 0.5) / out as f64 * bx.height();
    let c = bx.c0 + (j as f64 + 0.5) / out as f64 * bx.width();
    let fr = (r / stride - 0.5).clamp(0.0, (h - 1) as f64);
    let fc = (c / stride - 0.5).clamp(0.0, (w - 1) as f64);
    (fr, fc)
}

/// Pools box `bx` (image coordinates) from one image's feature map into an
/// (C, out, out) grid by bilinear sampling at each cell centre.
pub fn roi_align(feat: &ArrayView3<f64>, bx: &Box2, out: usize, stride: f64) -> Array3<f64> {
    let (c, h, w) = feat.dim();
    let mut y = Array3::zeros((c, out, out));
    for i in 0..out {
        for j in 0..out {
            let (fr, fc) = roi_cell_coords(bx, out, stride, h, w, i, j);
            for (r, cc, wgt) in bilinear_weights(fr, fc, h, w) {
                for ch in 0..c {
                    y[[ch, i, j]] += wgt * feat[[ch, r, cc]];
                }
            }
        }
    }
    y
}

/// Adjoint of [`roi_align`]: scatters cell gradients onto the feature map.
pub fn roi_align_backward(
    g: &ArrayView3<f64>,
    bx: &Box2,
    stride: f64,
    gfeat: &mut ArrayViewMut3<f64>,
) {
    let (c, h, w) = gfeat.dim();
    let out = g.dim().1;
    for i in 0..out {
        for j in 0..out {
            let (fr, fc) = roi_cell_coords(bx, out, stride, h, w, i, j);
            for (r, cc, wgt) in bilinear_weights(fr, fc, h, w) {
                for ch in 0..c {
                    gfeat[[ch, r, cc]] += wgt * g[[ch, i, j]];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// heads

#[derive(Debug, Clone)]
struct BoxHead {
    fc1: Linear,
    r1: Relu,
    fc2: Linear,
    r2: Relu,
    fuse: Linear,
    rf: Relu,
    cls: Linear,
    boxr: Linear,
    hidden: usize,
}

impl BoxHead {
    fn new(cfg: &ModelConfig, fusion: FusionMode, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.fpn_channels * cfg.roi_size * cfg.roi_size;
        let h = cfg.head_hidden;
        BoxHead {
            fc1: Linear::new("head.fc1", d, h, rng),
            r1: Relu::default(),
            fc2: Linear::new("head.fc2", h, h, rng),
            r2: Relu::default(),
            fuse: Linear::new("head.fuse", h + fusion.extra_len(), cfg.fusion_hidden, rng),
            rf: Relu::default(),
            cls: Linear::new("head.cls", cfg.fusion_hidden, 3, rng),
            boxr: Linear::new("head.box", h, 4, rng),
            hidden: h,
        }
    }

    /// `extras` carries the per-ROI prior slots (possibly zero columns).
    fn forward(
        &mut self,
        rois: &Array2<f64>,
        extras: &Array2<f64>,
        train: bool,
    ) -> (Array2<f64>, Array2<f64>) {
        let t = self.r1.forward_2d(&self.fc1.forward(rois, train), train);
        let t = self.r2.forward_2d(&self.fc2.forward(&t, train), train);
        let n = t.nrows();
        let mut fused = Array2::zeros((n, self.hidden + extras.ncols()));
        fused.slice_mut(s![.., ..self.hidden]).assign(&t);
        if extras.ncols() > 0 {
            fused.slice_mut(s![.., self.hidden..]).assign(extras);
        }
        let f = self.rf.forward_2d(&self.fuse.forward(&fused, train), train);
        let logits = self.cls.forward(&f, train);
        let deltas = self.boxr.forward(&t, train);
        (logits, deltas)
    }

    fn backward(&mut self, glogits: &Array2<f64>, gdeltas: &Array2<f64>) -> Array2<f64> {
        let gf = self.rf.backward_2d(&self.cls.backward(glogits));
        let gfused = self.fuse.backward(&gf);
        let gt = gfused.slice(s![.., ..self.hidden]).to_owned() + self.boxr.backward(gdeltas);
        let g = self.fc2.backward(&self.r2.backward_2d(&gt));
        self.fc1.backward(&self.r1.backward_2d(&g))
    }

    fn params(&mut self) -> Vec<&mut Param> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p.extend(self.fuse.params());
        p.extend(self.cls.params());
        p.extend(self.boxr.params());
        p
    }
}

#[derive(Debug, Clone)]
struct MaskHead {
    c1: Conv2d,
    r1: Relu,
    c2: Conv2d,
    r2: Relu,
    out: Conv2d,
}

impl MaskHead {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.fpn_channels;
        MaskHead {
            c1: Conv2d::new("mask.c1", c, c, 3, 1, true, rng),
            r1: Relu::default(),
            c2: Conv2d::new("mask.c2", c, c, 3, 1, true, rng),
            r2: Relu::default(),
            out: Conv2d::new("mask.out", c, 1, 1, 1, true, rng),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let h = self.r1.forward_4d(&self.c1.forward(x, train), train);
        let h = self.r2.forward_4d(&self.c2.forward(&h, train), train);
        self.out.forward(&h, train)
    }

    fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let g = self.out.backward(gy);
        let g = self.c2.backward(&self.r2.backward_4d(&g));
        self.c1.backward(&self.r1.backward_4d(&g))
    }

    fn params(&mut self) -> Vec<&mut Param> {
        let mut p = self.c1.params();
        p.extend(self.c2.params());
        p.extend(self.out.params());
        p
    }
}

// ---------------------------------------------------------------------------
// the model

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub fusion: FusionMode,
    backbone: Backbone,
    fpn: Fpn,
    rpn: Rpn,
    head: BoxHead,
    mask_head: MaskHead,
}

fn bbox_to_box2(b: &BBox) -> Box2 {
    Box2 {
        r0: b.row_min as f64,
        c0: b.col_min as f64,
        r1: (b.row_max + 1) as f64,
        c1: (b.col_max + 1) as f64,
    }
}

struct RoiRec {
    img: usize,
    bx: Box2,
    /// Head target over {BG=0, class0=1, class1=2}.
    target: usize,
    /// Box-regression target for positive ROIs.
    deltas: Option<[f64; 4]>,
}

impl Model {
    /// Deterministic construction: the same (config, fusion, seed) always
    /// yields identical initial parameters.
    pub fn build(config: ModelConfig, fusion: FusionMode, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = rng_for(seed, "model-init", 0);
        let backbone = Backbone::new(&config, &mut rng);
        let fpn = Fpn::new(&config, &mut rng);
        let rpn = Rpn::new(&config, &mut rng);
        let head = BoxHead::new(&config, fusion, &mut rng);
        let mask_head = MaskHead::new(&config, &mut rng);
        Ok(Model { config, fusion, backbone, fpn, rpn, head, mask_head })
    }

    /// (backbone parameters, head parameters): the split used by two-stage
    /// training — stage 1 updates only the second group.
    pub fn params_split(&mut self) -> (Vec<&mut Param>, Vec<&mut Param>) {
        let bb = self.backbone.params();
        let mut heads = self.fpn.params();
        heads.extend(self.rpn.params());
        heads.extend(self.head.params());
        heads.extend(self.mask_head.params());
        (bb, heads)
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        if c != self.config.input_channels {
            return Err(CoreError::Config(format!(
                "model expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        Ok(())
    }

    fn anchors_for(&self, fh: usize, fw: usize) -> Vec<Box2> {
        generate_anchors(
            fh,
            fw,
            self.config.level_stride(self.config.rpn_level),
            &self.config.anchor_scales,
            &self.config.anchor_ratios,
        )
    }

    /// Decodes and filters RPN outputs of one image into scored proposals.
    fn gen_proposals(
        &self,
        obj: &ArrayView3<f64>,
        boxd: &ArrayView3<f64>,
        anchors: &[Box2],
        img_h: f64,
        img_w: f64,
    ) -> Vec<Box2> {
        let (a_ch, _fh, fw) = obj.dim();
        let mut scored: Vec<(f64, Box2)> = Vec::with_capacity(anchors.len());
        for (k, anchor) in anchors.iter().enumerate() {
            let a = k % a_ch;
            let cell = k / a_ch;
            let (i, j) = (cell / fw, cell % fw);
            let score = 1.0 / (1.0 + (-obj[[a, i, j]]).exp());
            let d = [
                boxd[[4 * a, i, j]],
                boxd[[4 * a + 1, i, j]],
                boxd[[4 * a + 2, i, j]],
                boxd[[4 * a + 3, i, j]],
            ];
            let bx = decode_deltas(anchor, &d).clip(img_h, img_w);
            if bx.height() >= 1.0 && bx.width() >= 1.0 {
                scored.push((score, bx));
            }
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        scored.truncate(self.config.proposals_pre_nms);
        let boxes: Vec<Box2> = scored.iter().map(|(_, b)| *b).collect();
        let scores: Vec<f64> = scored.iter().map(|(sc, _)| *sc).collect();
        nms(&boxes, &scores, 0.7, self.config.proposals_post_nms)
            .into_iter()
            .map(|i| boxes[i])
            .collect()
    }

    /// Inference on a single stacked 2D slice. Emits zero or more detections,
    /// each with softmax-normalized class scores; detections whose foreground
    /// confidence falls below the configured threshold are suppressed.
    pub fn forward(
        &mut self,
        channels: &Array3<f64>,
        priors: Option<&PriorFeatures>,
    ) -> Result<Vec<Detection>> {
        let (c, h, w) = channels.dim();
        self.check_channels(c)?;
        let x = channels.clone().insert_axis(Axis(0));
        let feats = self.backbone.forward(&x, false);
        let p = self.fpn.forward(&feats, false);
        let lvl = self.config.rpn_level;
        let stride = self.config.level_stride(lvl) as f64;
        let (obj, boxd) = self.rpn.forward(&p[lvl], false);
        if obj.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric("non-finite RPN activations".into()));
        }
        let (_, _, fh, fw) = obj.dim();
        let anchors = self.anchors_for(fh, fw);
        let proposals = self.gen_proposals(
            &obj.index_axis(Axis(0), 0),
            &boxd.index_axis(Axis(0), 0),
            &anchors,
            h as f64,
            w as f64,
        );
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let extras = self.extras_matrix(proposals.len(), priors)?;
        let d = self.config.fpn_channels * self.config.roi_size * self.config.roi_size;
        let mut rois = Array2::zeros((proposals.len(), d));
        let pmap = p[lvl].index_axis(Axis(0), 0);
        for (r, bx) in proposals.iter().enumerate() {
            let f = roi_align(&pmap, bx, self.config.roi_size, stride);
            rois.row_mut(r).assign(&f.into_shape_with_order(d).unwrap());
        }
        let (logits, deltas) = self.head.forward(&rois, &extras, false);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric("non-finite head activations".into()));
        }
        let probs = softmax_rows(&logits);
        let mut dets = Vec::new();
        for (r, bx) in proposals.iter().enumerate() {
            let scores = [probs[[r, 0]], probs[[r, 1]], probs[[r, 2]]];
            let fg = scores[1].max(scores[2]);
            if fg < self.config.score_threshold {
                continue;
            }
            let dl = [deltas[[r, 0]], deltas[[r, 1]], deltas[[r, 2]], deltas[[r, 3]]];
            let refined = decode_deltas(bx, &dl).clip(h as f64, w as f64);
            let mfeat = roi_align(&pmap, &refined, self.config.mask_size, stride)
                .insert_axis(Axis(0));
            let mlogits = self.mask_head.forward(&mfeat, false);
            let mask = mlogits
                .index_axis(Axis(0), 0)
                .index_axis(Axis(0), 0)
                .mapv(|v| 1.0 / (1.0 + (-v).exp()));
            dets.push(Detection { bbox: refined, class_scores: scores, mask, score: fg });
        }
        // deduplicate overlapping detections, best first
        let boxes: Vec<Box2> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        let keep = nms(&boxes, &scores, 0.5, dets.len().max(1));
        let mut out: Vec<Detection> = Vec::with_capacity(keep.len());
        for k in keep {
            out.push(dets[k].clone());
        }
        Ok(out)
    }

    fn extras_matrix(&self, rows: usize, priors: Option<&PriorFeatures>) -> Result<Array2<f64>> {
        let extra = self.fusion.extra_len();
        let mut m = Array2::zeros((rows, extra));
        if extra > 0 {
            let vals = fuse_priors(&[], priors, self.fusion)?;
            for mut row in m.rows_mut() {
                row.assign(&ndarray::ArrayView1::from(&vals[..]));
            }
        }
        Ok(m)
    }

    /// One forward/backward pass over a batch: computes all five losses and
    /// leaves parameter gradients in place (caller applies the optimizer).
    /// In `HeadsOnly` stage the backbone runs in eval mode and receives no
    /// gradient.
    pub fn train_batch(
        &mut self,
        samples: &[&TrainingSample],
        stage: TrainStage,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossBundle> {
        if samples.is_empty() {
            return Err(CoreError::Config("empty training batch".into()));
        }
        let (c, h, w) = samples[0].channels.dim();
        self.check_channels(c)?;
        for sm in samples {
            if sm.channels.dim() != (c, h, w) {
                return Err(CoreError::Config("mixed sample shapes in batch".into()));
            }
        }
        let b = samples.len();
        let mut x = Array4::zeros((b, c, h, w));
        for (i, sm) in samples.iter().enumerate() {
            x.index_axis_mut(Axis(0), i).assign(&sm.channels);
        }
        let cfg = self.config.clone();
        let train_backbone = stage == TrainStage::Full;
        let feats = self.backbone.forward(&x, train_backbone);
        let p = self.fpn.forward(&feats, true);
        let lvl = cfg.rpn_level;
        let stride = cfg.level_stride(lvl) as f64;
        let (obj, boxd) = self.rpn.forward(&p[lvl], true);
        let (_, a_ch, fh, fw) = obj.dim();
        let anchors = self.anchors_for(fh, fw);

        // --- RPN targets ---------------------------------------------------
        let mut obj_entries: Vec<(usize, usize, f64)> = Vec::new(); // (img, anchor, target)
        let mut box_entries: Vec<(usize, usize, [f64; 4])> = Vec::new();
        let mut gts = Vec::with_capacity(b);
        for (i, sm) in samples.iter().enumerate() {
            let gt = bbox_to_box2(&sm.gt_bbox);
            gts.push(gt);
            let ious: Vec<f64> = anchors.iter().map(|a| iou(a, &gt)).collect();
            let best = ious
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(k, _)| k)
                .unwrap();
            let mut pos: Vec<usize> =
                (0..anchors.len()).filter(|&k| ious[k] >= cfg.rpn_pos_iou).collect();
            if !pos.contains(&best) {
                pos.push(best);
            }
            let mut neg: Vec<usize> =
                (0..anchors.len()).filter(|&k| ious[k] < cfg.rpn_neg_iou).collect();
            neg.shuffle(rng);
            neg.truncate((2 * pos.len()).clamp(8, 32));
            for &k in &pos {
                obj_entries.push((i, k, 1.0));
                box_entries.push((i, k, encode_deltas(&anchors[k], &gt)));
            }
            for &k in &neg {
                obj_entries.push((i, k, 0.0));
            }
        }
        if box_entries.is_empty() {
            log::warn!("batch without positive anchors: RPN box loss degenerate");
        }
        let anchor_pos = |k: usize| {
            let a = k % a_ch;
            let cell = k / a_ch;
            (a, cell / fw, cell % fw)
        };
        let logits: Vec<f64> = obj_entries
            .iter()
            .map(|&(i, k, _)| {
                let (a, r, cc) = anchor_pos(k);
                obj[[i, a, r, cc]]
            })
            .collect();
        let targets: Vec<f64> = obj_entries.iter().map(|&(_, _, t)| t).collect();
        let (l_obj, g_obj_flat) = bce_with_logits(&logits, &targets);
        let mut gobj = Array4::zeros(obj.raw_dim());
        for (&(i, k, _), g) in obj_entries.iter().zip(&g_obj_flat) {
            let (a, r, cc) = anchor_pos(k);
            gobj[[i, a, r, cc]] += g * cfg.loss_weights[0];
        }
        let box_preds: Vec<f64> = box_entries
            .iter()
            .flat_map(|&(i, k, _)| {
                let (a, r, cc) = anchor_pos(k);
                (0..4).map(move |d| (i, 4 * a + d, r, cc)).collect::<Vec<_>>()
            })
            .map(|(i, ch, r, cc)| boxd[[i, ch, r, cc]])
            .collect();
        let box_targets: Vec<f64> =
            box_entries.iter().flat_map(|&(_, _, d)| d.to_vec()).collect();
        let (l_rpn_box, g_box_flat) = smooth_l1(&box_preds, &box_targets);
        let mut gboxd = Array4::zeros(boxd.raw_dim());
        let mut gi = 0;
        for &(i, k, _) in &box_entries {
            let (a, r, cc) = anchor_pos(k);
            for d in 0..4 {
                gboxd[[i, 4 * a + d, r, cc]] += g_box_flat[gi] * cfg.loss_weights[1];
                gi += 1;
            }
        }

        // --- ROI sampling --------------------------------------------------
        let mut rois: Vec<RoiRec> = Vec::new();
        for (i, sm) in samples.iter().enumerate() {
            let mut props = self.gen_proposals(
                &obj.index_axis(Axis(0), i),
                &boxd.index_axis(Axis(0), i),
                &anchors,
                h as f64,
                w as f64,
            );
            props.push(gts[i]); // the ground-truth box is always a candidate
            let mut pos: Vec<(f64, Box2)> = Vec::new();
            let mut neg: Vec<Box2> = Vec::new();
            for bx in props {
                let ov = iou(&bx, &gts[i]);
                if ov >= cfg.roi_pos_iou {
                    pos.push((ov, bx));
                } else {
                    neg.push(bx);
                }
            }
            pos.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            pos.truncate(cfg.train_rois / 2);
            neg.shuffle(rng);
            neg.truncate(cfg.train_rois - pos.len());
            for (_, bx) in pos {
                rois.push(RoiRec {
                    img: i,
                    bx,
                    target: sm.gt_class + 1,
                    deltas: Some(encode_deltas(&bx, &gts[i])),
                });
            }
            for bx in neg {
                rois.push(RoiRec { img: i, bx, target: 0, deltas: None });
            }
        }
        if rois.iter().all(|r| r.target == 0) {
            log::warn!("batch without positive ROIs: classification-only degenerate step");
        }

        // --- ROI head ------------------------------------------------------
        let d = cfg.fpn_channels * cfg.roi_size * cfg.roi_size;
        let mut roi_feats = Array2::zeros((rois.len(), d));
        for (r, rec) in rois.iter().enumerate() {
            let f = roi_align(
                &p[lvl].index_axis(Axis(0), rec.img),
                &rec.bx,
                cfg.roi_size,
                stride,
            );
            roi_feats.row_mut(r).assign(&f.into_shape_with_order(d).unwrap());
        }
        let mut extras = Array2::zeros((rois.len(), self.fusion.extra_len()));
        if self.fusion.extra_len() > 0 {
            for (r, rec) in rois.iter().enumerate() {
                let vals =
                    fuse_priors(&[], Some(&samples[rec.img].priors), self.fusion)?;
                extras.row_mut(r).assign(&ndarray::ArrayView1::from(&vals[..]));
            }
        }
        let (logits, deltas) = self.head.forward(&roi_feats, &extras, true);
        let cls_targets: Vec<usize> = rois.iter().map(|r| r.target).collect();
        let (l_cls, mut glogits) = class_weighted_ce(&logits, &cls_targets, &cfg.class_weights);
        glogits.mapv_inplace(|v| v * cfg.loss_weights[2]);
        let pos_rows: Vec<usize> =
            (0..rois.len()).filter(|&r| rois[r].deltas.is_some()).collect();
        let dpred: Vec<f64> = pos_rows
            .iter()
            .flat_map(|&r| (0..4).map(|k| deltas[[r, k]]).collect::<Vec<_>>())
            .collect();
        let dtarg: Vec<f64> =
            pos_rows.iter().flat_map(|&r| rois[r].deltas.unwrap().to_vec()).collect();
        let (l_hbox, g_hbox_flat) = smooth_l1(&dpred, &dtarg);
        let mut gdeltas = Array2::zeros(deltas.raw_dim());
        for (n, &r) in pos_rows.iter().enumerate() {
            for k in 0..4 {
                gdeltas[[r, k]] = g_hbox_flat[4 * n + k] * cfg.loss_weights[3];
            }
        }
        let groi = self.head.backward(&glogits, &gdeltas);

        // --- mask head on positive ROIs -------------------------------------
        let m = cfg.mask_size;
        let mut l_mask = 0.0;
        let mut gmfeat: Option<Array4<f64>> = None;
        if !pos_rows.is_empty() {
            let mut mfeat = Array4::zeros((pos_rows.len(), cfg.fpn_channels, m, m));
            let mut mtargets = Vec::with_capacity(pos_rows.len() * m * m);
            for (n, &r) in pos_rows.iter().enumerate() {
                let rec = &rois[r];
                let f = roi_align(&p[lvl].index_axis(Axis(0), rec.img), &rec.bx, m, stride);
                mfeat.index_axis_mut(Axis(0), n).assign(&f);
                let gt_mask = &samples[rec.img].gt_mask;
                for i in 0..m {
                    for j in 0..m {
                        let r_img = rec.bx.r0 + (i as f64 + 0.5) / m as f64 * rec.bx.height();
                        let c_img = rec.bx.c0 + (j as f64 + 0.5) / m as f64 * rec.bx.width();
                        let pr = (r_img.floor().max(0.0) as usize).min(h - 1);
                        let pc = (c_img.floor().max(0.0) as usize).min(w - 1);
                        mtargets.push(f64::from(gt_mask[[pr, pc]] != 0));
                    }
                }
            }
            let mlogits = self.mask_head.forward(&mfeat, true);
            let mflat: Vec<f64> = mlogits.iter().cloned().collect();
            let (lm, gm) = bce_with_logits(&mflat, &mtargets);
            l_mask = lm;
            let mut gml = Array4::from_shape_vec(mlogits.raw_dim(), gm).unwrap();
            gml.mapv_inplace(|v| v * cfg.loss_weights[4]);
            gmfeat = Some(self.mask_head.backward(&gml));
        }

        // --- assemble feature-map gradients and run the tail backward -------
        let mut gp: Vec<Array4<f64>> =
            p.iter().map(|pi| Array4::zeros(pi.raw_dim())).collect();
        for (r, rec) in rois.iter().enumerate() {
            let grow = groi
                .row(r)
                .to_owned()
                .into_shape_with_order((cfg.fpn_channels, cfg.roi_size, cfg.roi_size))
                .unwrap();
            roi_align_backward(
                &grow.view(),
                &rec.bx,
                stride,
                &mut gp[lvl].index_axis_mut(Axis(0), rec.img),
            );
        }
        if let Some(gm) = &gmfeat {
            for (n, &r) in pos_rows.iter().enumerate() {
                let rec = &rois[r];
                roi_align_backward(
                    &gm.index_axis(Axis(0), n),
                    &rec.bx,
                    stride,
                    &mut gp[lvl].index_axis_mut(Axis(0), rec.img),
                );
            }
        }
        let gp_rpn = self.rpn.backward(&gobj, &gboxd);
        gp[lvl] = &gp[lvl] + &gp_rpn;
        let gc = self.fpn.backward(gp);
        if train_backbone {
            self.backbone.backward(gc);
        }

        let bundle = combine_losses(
            [l_obj, l_rpn_box, l_cls, l_hbox, l_mask],
            cfg.loss_weights,
        );
        if !bundle.is_finite() {
            return Err(CoreError::Numeric(format!(
                "non-finite training loss: {bundle:?}"
            )));
        }
        Ok(bundle)
    }

    /// All parameters and batch-norm running statistics keyed by name.
    pub fn state_dict(&mut self) -> BTreeMap<String, TensorData> {
        let mut state = BTreeMap::new();
        {
            let (bb, heads) = self.params_split();
            for p in bb.into_iter().chain(heads) {
                state.insert(
                    p.name.clone(),
                    TensorData {
                        shape: p.value.shape().to_vec(),
                        data: p.value.iter().cloned().collect(),
                    },
                );
            }
        }
        for bn in self.backbone.bns() {
            state.insert(
                format!("{}.running_mean", bn.name),
                TensorData {
                    shape: vec![bn.running_mean.len()],
                    data: bn.running_mean.to_vec(),
                },
            );
            state.insert(
                format!("{}.running_var", bn.name),
                TensorData {
                    shape: vec![bn.running_var.len()],
                    data: bn.running_var.to_vec(),
                },
            );
        }
        state
    }

    pub fn load_state_dict(&mut self, state: &BTreeMap<String, TensorData>) -> Result<()> {
        let missing = |name: &str| {
            CoreError::Data(format!("checkpoint is missing tensor '{name}'"))
        };
        {
            let (bb, heads) = self.params_split();
            for p in bb.into_iter().chain(heads) {
                let t = state.get(&p.name).ok_or_else(|| missing(&p.name))?;
                if t.shape != p.value.shape() {
                    return Err(CoreError::Data(format!(
                        "checkpoint tensor '{}' has shape {:?}, expected {:?}",
                        p.name,
                        t.shape,
                        p.value.shape()
                    )));
                }
                p.value = ndarray::ArrayD::from_shape_vec(t.shape.clone(), t.data.clone())
                    .map_err(|e| CoreError::Data(e.to_string()))?;
                p.vel.fill(0.0);
                p.zero_grad();
            }
        }
        for bn in self.backbone.bns() {
            for (suffix, buf) in
                [("running_mean", &mut bn.running_mean), ("running_var", &mut bn.running_var)]
            {
                let name = format!("{}.{suffix}", bn.name);
                let t = state.get(&name).ok_or_else(|| missing(&name))?;
                if t.data.len() != buf.len() {
                    return Err(CoreError::Data(format!("checkpoint tensor '{name}' length mismatch")));
                }
                *buf = ndarray::Array1::from_vec(t.data.clone());
            }
        }
        Ok(())
    }
}

/// Flat tensor payload inside a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model with everything needed to run it: architecture, fusion
/// mode, task, and the training-split feature statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub fusion: FusionMode,
    pub task: Task,
    pub feature_stats: FeatureStats,
    pub state: BTreeMap<String, TensorData>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &mut Model,
    task: Task,
    feature_stats: FeatureStats,
) -> Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        fusion: model.fusion,
        task,
        feature_stats,
        state: model.state_dict(),
    };
    let file = std::fs::File::create(path)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    serde_json::to_writer(std::io::BufWriter::new(file), &ckpt)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Checkpoint)> {
    let file = std::fs::File::open(path)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(CoreError::Data(format!(
            "unsupported checkpoint version {}",
            ckpt.version
        )));
    }
    let mut model = Model::build(ckpt.config.clone(), ckpt.fusion, 0)?;
    model.load_state_dict(&ckpt.state)?;
    Ok((model, ckpt))
}
