//! Two-stage detector: tiny backbone with FPN, optional balanced-pyramid
//! refinement, RPN proposals, and decoupled RoI heads whose classification
//! branch pools through the feature offset module.

pub mod anchors;
pub mod config;
pub mod infer;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod rpn;
pub mod targets;
pub mod train;

pub use anchors::{generate_anchors, Anchor};
pub use config::{Ablation, DetectorConfig, InferConfig, OptimConfig, RoiConfig, RpnConfig};
pub use infer::{infer, Prediction};
pub use loss::{total_loss, LossBreakdown};
pub use model::{backbone_fpn, build_params, forward_heads, DetectorOutput, ImageRoi};
pub use params::ParamStore;
pub use rpn::Proposal;
pub use targets::{assign_targets, sample_rois};
pub use train::{train_loop, train_step, Sample, StepRecord, TrainState};
