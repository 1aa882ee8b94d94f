//! Detector configuration: every architectural and training knob,
//! serialized as versioned TOML. `desk()` (the default) is sized for
//! CPU training on synthetic data; `paper_scale()` carries the
//! reference constants for the full-size detector.

use crate::error::{Error, Result};
use crate::mlap::Arrangement;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::path::Path;

pub const CONFIG_VERSION: u32 = 1;

/// Which pooling the second stage uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// Ring-like shape-adaptive sampling.
    Adaptive,
    /// Regular k×k rotated-bin grid, single designated level.
    Typical,
}

/// Proposal-stage regression structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpnMode {
    /// Dual-branch: (x,y,w,h) from rotation-invariant features, θ from
    /// rotation-sensitive features.
    Dual,
    /// Baseline: every oriented anchor regresses all five variables in
    /// one process (per-location output 48×5).
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub version: u32,
    pub seed: u64,

    /// Images are resized so the shorter side matches (aspect kept).
    pub shorter_side: u32,

    /// Backbone widths, one per feature level (lowest level first).
    /// The top level always sits at stride 16.
    pub backbone_widths: Vec<usize>,

    pub arf_layers: usize,
    pub arf_filters: usize,
    pub arf_orientations: usize,

    pub anchor_scales: Vec<f64>,
    /// h:w aspect ratios, each below 1.
    pub anchor_ratios: Vec<f64>,
    pub orientation_bins: usize,

    pub rpn_mode: RpnMode,
    pub rpn_hidden: usize,
    pub rpn_nms_threshold: f64,
    pub rpn_train_pre_nms: usize,
    /// Proposal caps ("up to 2000 and 300 … for training and test").
    pub rpn_train_cap: usize,
    pub rpn_test_pre_nms: usize,
    pub rpn_test_cap: usize,

    pub label_iou_positive: f64,
    pub label_iou_negative: f64,
    /// Angular thresholds in radians (π/6 positive, π/3 negative).
    pub angle_positive: f64,
    pub angle_negative: f64,

    pub pooling_mode: PoolingMode,
    pub pool_out_size: usize,
    pub pool_arrangement: Arrangement,
    /// How many of the backbone levels pooling consumes (top-n).
    pub pool_levels: usize,
    pub pool_lateral_channels: usize,
    pub pool_channels: usize,
    pub proposal_enlargement: f64,

    pub fc_dim: usize,
    pub focal_second_stage: bool,
    pub rois_per_image: usize,
    pub roi_fg_fraction: f64,
    /// Rotated-IoU threshold for labeling a proposal positive.
    pub proposal_pos_iou: f64,
    /// Mix jittered ground-truth boxes into the training rois.
    pub augment_gt_rois: bool,

    pub final_nms_threshold: f64,
    pub report_threshold: f64,

    pub images_per_batch: usize,
    pub anchor_batch: usize,
    pub anchor_fg_fraction: f64,
    pub lr_first: f64,
    pub lr_second: f64,
    pub steps_first: usize,
    pub steps_second: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub focal_gamma: f64,
    pub loss_lambda: f64,
    /// Gaussian σ for head initialization.
    pub head_init_sigma: f64,
    /// Backbone/trunk initialization: He when true (needed when no
    /// pretrained backbone exists), σ-Gaussian otherwise.
    pub he_backbone_init: bool,
    /// Horizontal+vertical flip augmentation (triples the set).
    pub flip_augmentation: bool,
    /// Steps between validation evaluations during training (0 = off).
    pub eval_every: usize,
    /// Steps between checkpoints (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig::desk()
    }
}

impl DetectorConfig {
    /// Desk-scale defaults: trains on a CPU core in minutes.
    pub fn desk() -> Self {
        DetectorConfig {
            version: CONFIG_VERSION,
            seed: 17,
            shorter_side: 256,
            backbone_widths: vec![16, 24, 40],
            arf_layers: 3,
            arf_filters: 10,
            arf_orientations: 8,
            anchor_scales: vec![16.0, 24.0, 36.0, 48.0],
            anchor_ratios: vec![0.25, 1.0 / 7.0],
            orientation_bins: 6,
            rpn_mode: RpnMode::Dual,
            rpn_hidden: 48,
            rpn_nms_threshold: 0.7,
            rpn_train_pre_nms: 800,
            rpn_train_cap: 600,
            rpn_test_pre_nms: 400,
            rpn_test_cap: 100,
            label_iou_positive: 0.7,
            label_iou_negative: 0.3,
            angle_positive: PI / 6.0,
            angle_negative: PI / 3.0,
            pooling_mode: PoolingMode::Adaptive,
            pool_out_size: 7,
            pool_arrangement: Arrangement::Standard,
            pool_levels: 3,
            pool_lateral_channels: 24,
            pool_channels: 48,
            proposal_enlargement: 1.2,
            fc_dim: 256,
            focal_second_stage: true,
            rois_per_image: 32,
            roi_fg_fraction: 0.25,
            proposal_pos_iou: 0.6,
            augment_gt_rois: true,
            final_nms_threshold: 0.2,
            report_threshold: 0.5,
            images_per_batch: 2,
            anchor_batch: 256,
            anchor_fg_fraction: 0.25,
            lr_first: 1e-3,
            lr_second: 1e-4,
            steps_first: 1500,
            steps_second: 500,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weight_decay: 5e-4,
            focal_gamma: 2.0,
            loss_lambda: 1.0,
            head_init_sigma: 0.01,
            he_backbone_init: true,
            flip_augmentation: true,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }

    /// Reference constants of the full-size detector: VGG16-scale
    /// inputs, 3 ARF layers of 40 filters × 8 orientations, anchor
    /// scales 32–256, 7×7×256 pooling, two 1024-d FC heads, proposal
    /// caps 2000/300, 40k+40k schedule.
    pub fn paper_scale() -> Self {
        DetectorConfig {
            shorter_side: 600,
            backbone_widths: vec![64, 128, 256],
            arf_filters: 40,
            anchor_scales: vec![32.0, 64.0, 128.0, 256.0],
            rpn_hidden: 256,
            rpn_train_pre_nms: 6000,
            rpn_train_cap: 2000,
            rpn_test_pre_nms: 3000,
            rpn_test_cap: 300,
            pool_lateral_channels: 256,
            pool_channels: 256,
            fc_dim: 1024,
            rois_per_image: 128,
            steps_first: 40_000,
            steps_second: 40_000,
            he_backbone_init: false,
            eval_every: 0,
            ..DetectorConfig::desk()
        }
    }

    pub fn anchors_per_location(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    /// Feature strides of the backbone levels, lowest first; the top
    /// level is always stride 16.
    pub fn level_strides(&self) -> Vec<f64> {
        let l = self.backbone_widths.len();
        (0..l).map(|i| 16.0 / (1 << (l - 1 - i)) as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.version != CONFIG_VERSION {
            return fail(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.len() > 5 {
            return fail("backbone must have 1–5 levels".into());
        }
        if self.pool_levels == 0 || self.pool_levels > self.backbone_widths.len() {
            return fail(format!(
                "pool_levels {} exceeds backbone levels {}",
                self.pool_levels,
                self.backbone_widths.len()
            ));
        }
        if self.arf_layers == 0 || self.arf_filters == 0 || self.arf_orientations == 0 {
            return fail("ARF stack must be non-empty".into());
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.iter().any(|&r| r <= 0.0 || r >= 1.0)
        {
            return fail("anchor ratios must lie in (0, 1)".into());
        }
        if self.orientation_bins == 0 {
            return fail("need at least one orientation bin".into());
        }
        for (name, v, lo, hi) in [
            ("rpn_nms_threshold", self.rpn_nms_threshold, 0.0, 1.0),
            ("label_iou_positive", self.label_iou_positive, 0.0, 1.0),
            ("label_iou_negative", self.label_iou_negative, 0.0, 1.0),
            ("final_nms_threshold", self.final_nms_threshold, 0.0, 1.0),
            ("report_threshold", self.report_threshold, 0.0, 1.0),
            ("proposal_pos_iou", self.proposal_pos_iou, 0.0, 1.0),
            ("roi_fg_fraction", self.roi_fg_fraction, 0.0, 1.0),
            ("anchor_fg_fraction", self.anchor_fg_fraction, 0.0, 1.0),
            ("angle_positive", self.angle_positive, 0.0, PI / 2.0),
            ("angle_negative", self.angle_negative, 0.0, PI / 2.0),
        ] {
            if !(lo..=hi).contains(&v) {
                return fail(format!("{name} = {v} outside [{lo}, {hi}]"));
            }
        }
        if self.label_iou_negative > self.label_iou_positive {
            return fail("negative IoU threshold above positive".into());
        }
        if self.angle_positive > self.angle_negative {
            return fail("positive angle threshold above negative".into());
        }
        if self.proposal_enlargement < 1.0 {
            return fail("proposal enlargement must be ≥ 1".into());
        }
        if self.pool_out_size < 3 || self.pool_out_size % 2 == 0 {
            return fail("pool grid must be odd and ≥ 3".into());
        }
        if self.lr_first <= 0.0 || self.lr_second <= 0.0 || self.weight_decay < 0.0 {
            return fail("learning rates must be positive".into());
        }
        if self.images_per_batch == 0 || self.anchor_batch == 0 || self.rois_per_image == 0 {
            return fail("batch sizes must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize failed: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: DetectorConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse failed: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Hash of the canonical serialized form (run manifests).
    pub fn hash(&self) -> String {
        let toml = self.to_toml().unwrap_or_default();
        let digest = Sha256::digest(toml.as_bytes());
        format!("{digest:x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        DetectorConfig::desk().validate().unwrap();
        DetectorConfig::paper_scale().validate().unwrap();
    }

    #[test]
    fn paper_scale_carries_reference_constants() {
        let cfg = DetectorConfig::paper_scale();
        assert_eq!(cfg.arf_layers, 3);
        assert_eq!(cfg.arf_filters, 40);
        assert_eq!(cfg.arf_orientations, 8);
        assert_eq!(cfg.anchor_scales, vec![32.0, 64.0, 128.0, 256.0]);
        assert_eq!(cfg.anchors_per_location(), 8);
        assert_eq!(cfg.orientation_bins, 6);
        assert_eq!(cfg.rpn_train_cap, 2000);
        assert_eq!(cfg.rpn_test_cap, 300);
        assert_eq!(cfg.pool_channels, 256);
        assert_eq!(cfg.pool_out_size, 7);
        assert_eq!(cfg.fc_dim, 1024);
        assert_eq!(cfg.proposal_enlargement, 1.2);
        assert_eq!(cfg.final_nms_threshold, 0.2);
        assert_eq!(cfg.proposal_pos_iou, 0.6);
        assert_eq!(cfg.shorter_side, 600);
        assert_eq!((cfg.steps_first, cfg.steps_second), (40_000, 40_000));
        assert_eq!((cfg.lr_first, cfg.lr_second), (1e-3, 1e-4));
        assert_eq!(cfg.adam_beta1, 0.9);
        assert_eq!(cfg.weight_decay, 5e-4);
        assert_eq!(cfg.head_init_sigma, 0.01);
        assert_eq!(cfg.images_per_batch, 2);
        assert_eq!(cfg.anchor_batch, 256);
        assert_eq!(cfg.anchor_fg_fraction, 0.25);
    }

    #[test]
    fn toml_roundtrip_is_lossless() {
        let cfg = DetectorConfig::desk();
        let text = cfg.to_toml().unwrap();
        let back = DetectorConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn invalid_thresholds_rejected() {
        let mut cfg = DetectorConfig::desk();
        cfg.rpn_nms_threshold = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = DetectorConfig::desk();
        cfg.label_iou_negative = 0.9;
        assert!(cfg.validate().is_err());
        let mut cfg = DetectorConfig::desk();
        cfg.pool_levels = 9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn level_strides_top_is_16() {
        let mut cfg = DetectorConfig::desk();
        assert_eq!(cfg.level_strides(), vec![4.0, 8.0, 16.0]);
        cfg.backbone_widths = vec![8];
        assert_eq!(cfg.level_strides(), vec![16.0]);
        cfg.backbone_widths = vec![4, 6, 8, 12, 16];
        assert_eq!(cfg.level_strides(), vec![1.0, 2.0, 4.0, 8.0, 16.0]);
    }
}
