//! Desk-scale single-stage anchor-free FPN detector.
//!
//! Teacher and student share one architecture family and differ only by a
//! channel width multiplier. The backbone is a chain of stride-2 3x3
//! convolutions; FPN levels are built from 1x1 laterals fused top-down with
//! nearest upsampling; one shared 3x3 head predicts class logits, four
//! box-edge distances and an objectness logit per location.

mod assign;
mod checkpoint;
mod decode;
mod loss;
mod model;

pub use assign::{assign_targets, LevelAssignment, TargetAssignment, BACKGROUND};
pub use checkpoint::{hash_params, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use decode::{decode, nms, DecodeParams};
pub use loss::{task_loss, task_loss_with_grad, LevelLoss, TaskLossBreakdown};
pub use model::{DetectorModel, ForwardTrace, HeadGrad, ModelGrads};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid detector spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite {component} loss at level {level}, location ({y}, {x})")]
    NonFiniteLoss { component: &'static str, level: usize, y: usize, x: usize },
}

/// Architecture description shared by teacher and student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub width_multiplier: f64,
    pub num_classes: usize,
    pub fpn_strides: Vec<usize>,
    pub fpn_channels: usize,
}

impl DetectorSpec {
    pub const DEFAULT_STRIDES: [usize; 3] = [8, 16, 32];

    /// Spec with default strides and FPN width `round(64 * width_multiplier)`.
    pub fn new(width_multiplier: f64, num_classes: usize) -> Self {
        DetectorSpec {
            width_multiplier,
            num_classes,
            fpn_strides: Self::DEFAULT_STRIDES.to_vec(),
            fpn_channels: Self::default_fpn_channels(width_multiplier),
        }
    }

    pub fn default_fpn_channels(width_multiplier: f64) -> usize {
        ((64.0 * width_multiplier).round() as usize).max(1)
    }

    /// Backbone channel count at a given stride.
    pub fn backbone_channels(&self, stride: usize) -> usize {
        ((2.0 * stride as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.num_classes == 0 {
            return Err(DetectorError::InvalidSpec("num_classes must be >= 1".into()));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(DetectorError::InvalidSpec("width_multiplier must be positive".into()));
        }
        if self.fpn_channels == 0 {
            return Err(DetectorError::InvalidSpec("fpn_channels must be >= 1".into()));
        }
        if self.fpn_strides.is_empty() {
            return Err(DetectorError::InvalidSpec("fpn_strides must be nonempty".into()));
        }
        for w in self.fpn_strides.windows(2) {
            if w[1] <= w[0] {
                return Err(DetectorError::InvalidSpec("fpn_strides must be strictly increasing".into()));
            }
        }
        for &s in &self.fpn_strides {
            if !s.is_power_of_two() || s < 2 {
                return Err(DetectorError::InvalidSpec(format!(
                    "stride {s} unsupported: strides must be powers of two >= 2"
                )));
            }
        }
        Ok(())
    }

    pub fn max_stride(&self) -> usize {
        *self.fpn_strides.last().expect("validated nonempty")
    }

    pub fn num_levels(&self) -> usize {
        self.fpn_strides.len()
    }

    /// Spatial grid of a level for a padded image size.
    pub fn level_dims(&self, level: usize, height: usize, width: usize) -> (usize, usize) {
        let s = self.fpn_strides[level];
        (height.div_ceil(s), width.div_ceil(s))
    }

    /// Assignment range bucket for a level: level `l` owns boxes whose longest
    /// side lies in `[4 * stride, 8 * stride)`, unbounded below on the first
    /// level and above on the last.
    pub fn size_bucket(&self, level: usize) -> (f64, f64) {
        let s = self.fpn_strides[level] as f64;
        let lo = if level == 0 { 0.0 } else { 4.0 * s };
        let hi = if level + 1 == self.fpn_strides.len() { f64::INFINITY } else { 8.0 * s };
        (lo, hi)
    }
}

/// Multi-scale feature maps of one image, one `[fpn_channels, h, w]` tensor
/// per FPN level.
#[derive(Debug, Clone)]
pub struct FPNFeatures {
    pub levels: Vec<Tensor>,
}

/// Per-location head predictions at one FPN level.
///
/// `cls_logits` and `obj_logits` are raw logits; `box_distances` are the
/// decoded left/top/right/bottom distances in stride units (softplus-mapped,
/// strictly positive).
#[derive(Debug, Clone)]
pub struct HeadLevel {
    pub stride: usize,
    pub cls_logits: Tensor,
    pub box_distances: Tensor,
    pub obj_logits: Tensor,
}

/// Head predictions of one image across all FPN levels.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub levels: Vec<HeadLevel>,
}

impl HeadOutputs {
    pub fn num_classes(&self) -> usize {
        self.levels.first().map(|l| l.cls_logits.c).unwrap_or(0)
    }
}
