//! The 2D hybrid multi-task network: residual backbone with feature pyramid,
//! region proposal network, ROI alignment, and detection/classification +
//! mask heads with late fusion of prior-knowledge features.

pub mod anchors;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::preprocess::PriorFeatures;

pub use anchors::Box2;
pub use loss::LossBundle;
pub use model::{load_checkpoint, save_checkpoint, Checkpoint, Model, TrainStage};

/// Which prior-knowledge features are concatenated with the pooled ROI
/// features in the classification branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Conventional CNN: imaging features only.
    None,
    Age,
    Loc,
    AgeLoc,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] =
        [FusionMode::None, FusionMode::Age, FusionMode::Loc, FusionMode::AgeLoc];

    /// Number of prior slots appended to the ROI feature vector.
    pub fn extra_len(self) -> usize {
        match self {
            FusionMode::None => 0,
            FusionMode::Age => 1,
            FusionMode::Loc => 9,
            FusionMode::AgeLoc => 10,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Age => "age",
            FusionMode::Loc => "loc",
            FusionMode::AgeLoc => "age+loc",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "age" => Ok(FusionMode::Age),
            "loc" => Ok(FusionMode::Loc),
            "age+loc" | "age_loc" => Ok(FusionMode::AgeLoc),
            other => Err(CoreError::Config(format!("unknown fusion mode '{other}'"))),
        }
    }
}

/// Concatenates standardized prior features onto an ROI feature vector.
/// Modes other than `none` require priors to be present.
pub fn fuse_priors(
    roi_features: &[f64],
    priors: Option<&PriorFeatures>,
    mode: FusionMode,
) -> Result<Vec<f64>> {
    let mut out = roi_features.to_vec();
    if mode == FusionMode::None {
        return Ok(out);
    }
    let p = priors.ok_or_else(|| {
        CoreError::Config(format!("fusion mode '{mode}' requires prior features"))
    })?;
    match mode {
        FusionMode::None => unreachable!(),
        FusionMode::Age => out.push(p.age_std),
        FusionMode::Loc => out.extend_from_slice(&p.loc_probs),
        FusionMode::AgeLoc => {
            out.push(p.age_std);
            out.extend_from_slice(&p.loc_probs);
        }
    }
    Ok(out)
}

/// One detected region: box, normalized 3-way class scores {BG, class0,
/// class1}, and an in-box mask probability map.
#[derive(Debug, Clone)]
pub struct Detection {
    pub bbox: Box2,
    pub class_scores: [f64; 3],
    pub mask: Array2<f64>,
    /// Foreground confidence: max of the two non-BG scores.
    pub score: f64,
}

impl Detection {
    /// Foreground class with the larger score: 0 or 1.
    pub fn top_class(&self) -> usize {
        usize::from(self.class_scores[2] > self.class_scores[1])
    }
}

/// Architecture and detector hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// 2 (T1c, T2) or 3 (T1c, T2, FLAIR).
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub fpn_channels: usize,
    /// Pyramid level carrying the anchors and ROI pooling.
    pub rpn_level: usize,
    /// Anchor side lengths in pixels.
    pub anchor_scales: Vec<f64>,
    /// Anchor aspect ratios (height/width).
    pub anchor_ratios: Vec<f64>,
    pub roi_size: usize,
    pub mask_size: usize,
    /// Width of the shared fully connected trunk in the ROI head.
    pub head_hidden: usize,
    /// Width of the fusion layer after prior concatenation.
    pub fusion_hidden: usize,
    pub num_foreground_classes: usize,
    /// Cross-entropy weights over {BG, class0, class1}.
    pub class_weights: [f64; 3],
    /// Detections with foreground confidence below this are suppressed.
    pub score_threshold: f64,
    /// Relative weights of (rpn_objectness, rpn_box, head_class, head_box,
    /// head_mask) in the total loss.
    pub loss_weights: [f64; 5],
    pub proposals_pre_nms: usize,
    pub proposals_post_nms: usize,
    /// ROIs sampled per image during training.
    pub train_rois: usize,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub roi_pos_iou: f64,
}

impl ModelConfig {
    /// Desk-scale preset: a shallow residual backbone that trains in minutes
    /// on a CPU.
    pub fn desk(input_channels: usize) -> Self {
        ModelConfig {
            input_channels,
            stem_channels: 4,
            stage_channels: vec![4, 8, 16],
            blocks_per_stage: vec![1, 1, 1],
            fpn_channels: 8,
            rpn_level: 1,
            anchor_scales: vec![8.0, 16.0, 32.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            roi_size: 7,
            mask_size: 14,
            head_hidden: 64,
            fusion_hidden: 32,
            num_foreground_classes: 2,
            class_weights: [1.0, 1.0, 1.0],
            score_threshold: 0.5,
            loss_weights: [1.0; 5],
            proposals_pre_nms: 64,
            proposals_post_nms: 12,
            train_rois: 8,
            rpn_pos_iou: 0.5,
            rpn_neg_iou: 0.3,
            roi_pos_iou: 0.5,
        }
    }

    /// Full-depth preset (ResNet-101-scale stage layout). Constructible and
    /// checkpoint-compatible, but far beyond a desk training budget.
    pub fn deep(input_channels: usize) -> Self {
        ModelConfig {
            stem_channels: 64,
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: vec![3, 4, 23, 3],
            fpn_channels: 256,
            rpn_level: 1,
            head_hidden: 1024,
            fusion_hidden: 256,
            proposals_pre_nms: 1000,
            proposals_post_nms: 100,
            train_rois: 64,
            ..ModelConfig::desk(input_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 2 && self.input_channels != 3 {
            return Err(CoreError::Config(format!(
                "input_channels must be 2 or 3, got {}",
                self.input_channels
            )));
        }
        if self.stage_channels.is_empty()
            || self.stage_channels.len() != self.blocks_per_stage.len()
        {
            return Err(CoreError::Config(
                "stage_channels and blocks_per_stage must be nonempty and equal-length".into(),
            ));
        }
        if self.rpn_level >= self.stage_channels.len() {
            return Err(CoreError::Config(format!(
                "rpn_level {} outside the {} pyramid levels",
                self.rpn_level,
                self.stage_channels.len()
            )));
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return Err(CoreError::Config("anchor scales/ratios must be nonempty".into()));
        }
        if self.anchor_scales.iter().chain(&self.anchor_ratios).any(|&v| v <= 0.0) {
            return Err(CoreError::Config("anchor scales/ratios must be positive".into()));
        }
        if self.roi_size < 2 || self.mask_size < 2 {
            return Err(CoreError::Config("ROI/mask sizes must be at least 2".into()));
        }
        if self.num_foreground_classes != 2 {
            return Err(CoreError::Config("exactly two foreground classes are supported".into()));
        }
        if self.class_weights.iter().any(|&w| w <= 0.0) {
            return Err(CoreError::Config("class weights must be positive".into()));
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(CoreError::Config("score threshold must lie in (0, 1)".into()));
        }
        if self.train_rois == 0 || self.proposals_pre_nms == 0 || self.proposals_post_nms == 0 {
            return Err(CoreError::Config("proposal/ROI budgets must be positive".into()));
        }
        Ok(())
    }

    /// Downsampling factor of pyramid level `level` relative to the input.
    pub fn level_stride(&self, level: usize) -> usize {
        2usize << level
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn priors() -> PriorFeatures {
        let mut loc = [0.0; 9];
        loc[2] = 1.0;
        PriorFeatures { age_std: -0.5, loc_probs: loc }
    }

    #[test]
    fn fuse_none_is_identity() {
        let roi = vec![1.0, 2.0, 3.0];
        let out = fuse_priors(&roi, None, FusionMode::None).unwrap();
        assert_eq!(out, roi);
    }

    #[test]
    fn fuse_lengths_per_mode() {
        let roi = vec![0.0; 5];
        let p = priors();
        for (mode, extra) in [
            (FusionMode::None, 0),
            (FusionMode::Age, 1),
            (FusionMode::Loc, 9),
            (FusionMode::AgeLoc, 10),
        ] {
            let out = fuse_priors(&roi, Some(&p), mode).unwrap();
            assert_eq!(out.len(), 5 + extra, "{mode}");
        }
        // age slot carries the standardized value, zero passes through as zero
        let z = PriorFeatures { age_std: 0.0, loc_probs: [0.0; 9] };
        let out = fuse_priors(&roi, Some(&z), FusionMode::Age).unwrap();
        assert_eq!(out[5], 0.0);
        let out = fuse_priors(&roi, Some(&p), FusionMode::AgeLoc).unwrap();
        assert_eq!(out[5], -0.5);
        assert_eq!(out[6 + 2], 1.0);
    }

    #[test]
    fn fuse_missing_priors_rejected() {
        let err = fuse_priors(&[1.0], None, FusionMode::Age).unwrap_err();
        assert!(matches!(err, CoreError::Config(_)));
    }

    #[test]
    fn fusion_mode_round_trips_from_str() {
        for mode in FusionMode::ALL {
            assert_eq!(mode.as_str().parse::<FusionMode>().unwrap(), mode);
        }
        assert!("both".parse::<FusionMode>().is_err());
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        assert!(ModelConfig::desk(2).validate().is_ok());
        assert!(ModelConfig::desk(3).validate().is_ok());
        assert!(ModelConfig::deep(3).validate().is_ok());
        let mut c = ModelConfig::desk(2);
        c.input_channels = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(2);
        c.rpn_level = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(2);
        c.score_threshold = 1.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(2);
        c.class_weights[1] = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn level_strides_follow_pyramid() {
        let c = ModelConfig::desk(2);
        assert_eq!(c.level_stride(0), 2);
        assert_eq!(c.level_stride(1), 4);
        assert_eq!(c.level_stride(2), 8);
    }
}
