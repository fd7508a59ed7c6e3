use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fom::FomConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpnConfig {
    /// Anchor side lengths as multiples of the level stride.
    pub anchor_scales: Vec<f64>,
    /// Height / width ratios.
    pub anchor_ratios: Vec<f64>,
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// A gt's best anchor becomes positive when their IoU reaches this.
    pub min_pos_iou: f64,
    pub num_samples: usize,
    pub pos_fraction: f64,
    pub pre_nms_top_k_train: usize,
    pub pre_nms_top_k_test: usize,
    pub post_nms_top_n_train: usize,
    pub post_nms_top_n_test: usize,
    pub nms_iou: f64,
    pub min_size: f64,
    pub smooth_l1_beta: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self {
            anchor_scales: vec![8.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            pos_iou: 0.7,
            neg_iou: 0.3,
            min_pos_iou: 0.3,
            num_samples: 256,
            pos_fraction: 0.5,
            pre_nms_top_k_train: 2000,
            pre_nms_top_k_test: 1000,
            post_nms_top_n_train: 2000,
            post_nms_top_n_test: 1000,
            nms_iou: 0.7,
            min_size: 1.0,
            smooth_l1_beta: 1.0 / 9.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub num_samples: usize,
    pub pos_fraction: f64,
    pub add_gt_as_proposals: bool,
    /// Width of the two fully connected layers in each branch.
    pub hidden: usize,
    /// RoIs with `sqrt(area) < 2·finest_scale` go to the finest level, and
    /// each doubling moves one level up.
    pub finest_scale: f64,
    /// Regression targets are `encode_deltas(..) / target_stds`.
    pub target_stds: [f64; 4],
    pub smooth_l1_beta: f64,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            pos_iou: 0.5,
            neg_iou: 0.5,
            num_samples: 512,
            pos_fraction: 0.25,
            add_gt_as_proposals: true,
            hidden: 1024,
            finest_scale: 56.0,
            target_stds: [0.1, 0.1, 0.2, 0.2],
            smooth_l1_beta: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Foreground classes; logits carry one more column for background.
    pub num_classes: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Stem width followed by the four stage widths.
    pub backbone_channels: [usize; 5],
    pub fpn_width: usize,
    pub fom_enabled: bool,
    pub bfp_enabled: bool,
    pub fom_loss_weight: f64,
    pub fom: FomConfig,
    pub rpn: RpnConfig,
    pub roi: RoiConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 1500,
            input_height: 600,
            input_width: 800,
            backbone_channels: [16, 16, 32, 64, 128],
            fpn_width: 64,
            fom_enabled: true,
            bfp_enabled: true,
            fom_loss_weight: 1.0,
            fom: FomConfig::default(),
            rpn: RpnConfig::default(),
            roi: RoiConfig::default(),
        }
    }
}

/// Rows of the module ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Baseline,
    Fom,
    Bfp,
    Both,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::Fom, Ablation::Bfp, Ablation::Both];

    pub fn toggles(self) -> (bool, bool) {
        match self {
            Ablation::Baseline => (false, false),
            Ablation::Fom => (true, false),
            Ablation::Bfp => (false, true),
            Ablation::Both => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Fom => "fom",
            Ablation::Bfp => "bfp",
            Ablation::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim_start_matches('+') {
            "baseline" => Some(Ablation::Baseline),
            "fom" => Some(Ablation::Fom),
            "bfp" => Some(Ablation::Bfp),
            "both" => Some(Ablation::Both),
            _ => None,
        }
    }
}

impl DetectorConfig {
    /// Small model for 128×128 synthetic scenes.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            num_classes,
            input_height: 128,
            input_width: 128,
            backbone_channels: [16, 16, 32, 48, 64],
            fpn_width: 32,
            fom: FomConfig {
                k: 7,
                alpha: 0.1,
                sampling: 2,
                ..FomConfig::default()
            },
            rpn: RpnConfig {
                anchor_scales: vec![6.0],
                pre_nms_top_k_train: 400,
                pre_nms_top_k_test: 300,
                post_nms_top_n_train: 200,
                post_nms_top_n_test: 100,
                ..RpnConfig::default()
            },
            roi: RoiConfig {
                num_samples: 64,
                hidden: 128,
                ..RoiConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        (self.fom_enabled, self.bfp_enabled) = a.toggles();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1");
        }
        if self.input_height < 32 || self.input_width < 32 {
            return bad("input size must be at least 32x32");
        }
        if self.backbone_channels.iter().any(|&c| c == 0) || self.fpn_width == 0 {
            return bad("channel widths must be positive");
        }
        if self.rpn.anchor_scales.is_empty() || self.rpn.anchor_ratios.is_empty() {
            return bad("anchor scales and ratios must be non-empty");
        }
        if self.rpn.anchor_scales.iter().chain(&self.rpn.anchor_ratios).any(|&v| !(v > 0.0)) {
            return bad("anchor scales and ratios must be positive");
        }
        if self.fom.k == 0 || self.fom.sampling == 0 || self.fom.alpha < 0.0 {
            return bad("fom.k and fom.sampling must be >= 1 and fom.alpha >= 0");
        }
        if self.roi.hidden == 0 || self.roi.num_samples == 0 || self.rpn.num_samples == 0 {
            return bad("hidden width and sample counts must be positive");
        }
        for f in [self.rpn.pos_fraction, self.roi.pos_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return bad("positive fractions must lie in [0, 1]");
            }
        }
        if self.fom_loss_weight < 0.0 {
            return bad("fom_loss_weight must be >= 0");
        }
        Ok(())
    }

    /// Strides of the pyramid levels 2..=5.
    pub fn strides(&self) -> [usize; 4] {
        [4, 8, 16, 32]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub warmup_iters: usize,
    /// Warmup starts at `lr·warmup_ratio` and ramps linearly.
    pub warmup_ratio: f64,
    /// Iterations at which the rate is multiplied by `lr_gamma`.
    pub lr_steps: Vec<usize>,
    pub lr_gamma: f64,
    /// Rescale the global gradient when its L2 norm exceeds this.
    pub grad_clip: Option<f64>,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2.5e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            iterations: 12_000,
            batch_size: 2,
            warmup_iters: 500,
            warmup_ratio: 0.001,
            lr_steps: vec![8_000, 11_000],
            lr_gamma: 0.1,
            grad_clip: None,
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn toy() -> Self {
        Self {
            lr: 0.005,
            iterations: 3000,
            batch_size: 1,
            warmup_iters: 200,
            warmup_ratio: 0.01,
            lr_steps: vec![2200, 2700],
            grad_clip: Some(10.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("need lr >= 0, momentum in [0, 1), weight_decay >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect for 0-based iteration `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let decays = self.lr_steps.iter().filter(|&&s| step >= s).count() as i32;
        let base = self.lr * self.lr_gamma.powi(decays);
        if step < self.warmup_iters {
            let t = step as f64 / self.warmup_iters as f64;
            base * (self.warmup_ratio + (1.0 - self.warmup_ratio) * t)
        } else {
            base
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub score_thr: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            score_thr: 0.05,
            nms_iou: 0.5,
            max_dets: 100,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        DetectorConfig::default().validate().unwrap();
        DetectorConfig::toy(5).validate().unwrap();
        OptimConfig::default().validate().unwrap();
        OptimConfig::toy().validate().unwrap();
    }

    #[test]
    fn lr_schedule() {
        let c = OptimConfig {
            lr: 1.0,
            warmup_iters: 10,
            warmup_ratio: 0.1,
            lr_steps: vec![20, 30],
            lr_gamma: 0.1,
            ..OptimConfig::default()
        };
        assert!((c.lr_at(0) - 0.1).abs() < 1e-15);
        assert!((c.lr_at(5) - 0.55).abs() < 1e-15);
        assert_eq!(c.lr_at(10), 1.0);
        assert!((c.lr_at(25) - 0.1).abs() < 1e-15);
        assert!((c.lr_at(30) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()), Some(a));
        }
        assert_eq!(Ablation::parse("+both"), Some(Ablation::Both));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<DetectorConfig>("{\"fpn_widht\": 3}");
        assert!(err.is_err());
    }
}
