//! Adaptive instance weighting.
//!
//! The teacher's task loss on each ground-truth instance (its difficulty) is
//! mapped through `exp(-alpha * d)` to a distillation weight in (0, 1]:
//! instances the teacher predicts well keep weight near one, instances it
//! gets wrong are attenuated exponentially. The same mapping applied to each
//! FPN level's mean foreground loss gives scale-wise weights, and both are
//! rasterized into per-location weight maps that multiply the distillation
//! loss pointwise. Weights are constants: nothing differentiates through
//! this module.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{task_loss, DetectorError, HeadOutputs, TargetAssignment, BACKGROUND};

#[derive(Debug, Error)]
pub enum AidError {
    #[error("negative or non-finite input: d={d}, alpha={alpha}")]
    NegativeInput { d: f64, alpha: f64 },
    #[error("invalid aid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("instance {0} missing from the loss table")]
    UnknownInstance(u32),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

/// Which task-loss components enter the per-instance difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossComponent {
    Cls,
    Reg,
    Obj,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AidConfig {
    /// Difficulty attenuation exponent; 0 recovers uniform distillation.
    pub alpha: f64,
    /// Weight of the distillation term in the student objective.
    pub lambda: f64,
    /// Constant weight for background locations.
    pub w_bg: f64,
    /// Multiply per-instance weights by per-level weights.
    pub scale_weighting: bool,
    /// Components summed into the per-location teacher loss.
    pub loss_components: Vec<LossComponent>,
}

impl Default for AidConfig {
    fn default() -> Self {
        AidConfig {
            alpha: 0.1,
            lambda: 1.0,
            w_bg: 1.0,
            scale_weighting: true,
            loss_components: vec![LossComponent::Cls, LossComponent::Reg, LossComponent::Obj],
        }
    }
}

impl AidConfig {
    pub fn validate(&self) -> Result<(), AidError> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(AidError::InvalidConfig(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(AidError::InvalidConfig(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.w_bg.is_finite() && self.w_bg > 0.0 && self.w_bg <= 1.0) {
            return Err(AidError::InvalidConfig(format!("w_bg {} must be in (0, 1]", self.w_bg)));
        }
        if self.loss_components.is_empty() {
            return Err(AidError::InvalidConfig("loss_components must be nonempty".into()));
        }
        Ok(())
    }

    fn uses(&self, c: LossComponent) -> bool {
        self.loss_components.contains(&c)
    }
}

/// Adaptive weight `exp(-alpha * d)` for a non-negative difficulty `d`.
pub fn aid_weight(d: f64, alpha: f64) -> Result<f64, AidError> {
    if !(d.is_finite() && alpha.is_finite() && d >= 0.0 && alpha >= 0.0) {
        return Err(AidError::NegativeInput { d, alpha });
    }
    Ok((-alpha * d).exp())
}

/// Per-instance difficulty of one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceDifficulty {
    pub instance_id: u32,
    /// Mean teacher task loss over the instance's assigned locations.
    pub d_teacher: f64,
    pub weight: f64,
}

/// Per-FPN-level difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelDifficulty {
    pub level: usize,
    /// Mean teacher loss over the level's foreground locations (0 if none).
    pub d_level: f64,
    pub weight: f64,
}

/// Teacher difficulties and derived weights for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceLossTable {
    pub instances: Vec<InstanceDifficulty>,
    pub levels: Vec<LevelDifficulty>,
}

impl InstanceLossTable {
    pub fn weight_of(&self, instance_id: u32) -> Option<f64> {
        self.instances.iter().find(|i| i.instance_id == instance_id).map(|i| i.weight)
    }
}

/// Compute per-instance and per-level teacher difficulties from a frozen
/// teacher's head outputs. An image with no assigned instances yields an
/// empty instance list and all level weights exactly 1.
pub fn teacher_instance_losses(
    teacher_outputs: &HeadOutputs,
    targets: &TargetAssignment,
    cfg: &AidConfig,
) -> Result<InstanceLossTable, AidError> {
    cfg.validate()?;
    let breakdown = task_loss(teacher_outputs, targets)?;
    let (use_cls, use_reg, use_obj) =
        (cfg.uses(LossComponent::Cls), cfg.uses(LossComponent::Reg), cfg.uses(LossComponent::Obj));

    // (sum, count) per instance id, in first-seen order; plus per level.
    let mut ids: Vec<u32> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    let mut levels = Vec::with_capacity(targets.levels.len());
    for (li, tl) in targets.levels.iter().enumerate() {
        let mut level_sum = 0.0;
        let mut level_count = 0usize;
        for loc in 0..tl.h * tl.w {
            let id = tl.instance[loc];
            if id == BACKGROUND {
                continue;
            }
            let v = breakdown.location_loss(li, loc, use_cls, use_reg, use_obj);
            let slot = match ids.iter().position(|&x| x == id) {
                Some(p) => p,
                None => {
                    ids.push(id);
                    sums.push((0.0, 0));
                    ids.len() - 1
                }
            };
            sums[slot].0 += v;
            sums[slot].1 += 1;
            level_sum += v;
            level_count += 1;
        }
        let d_level = if level_count == 0 { 0.0 } else { level_sum / level_count as f64 };
        levels.push(LevelDifficulty { level: li, d_level, weight: aid_weight(d_level, cfg.alpha)? });
    }

    let mut instances = Vec::with_capacity(ids.len());
    for (id, (sum, count)) in ids.into_iter().zip(sums) {
        let d = sum / count as f64;
        instances.push(InstanceDifficulty { instance_id: id, d_teacher: d, weight: aid_weight(d, cfg.alpha)? });
    }
    instances.sort_by_key(|i| i.instance_id);
    Ok(InstanceLossTable { instances, levels })
}

/// Per-level, per-location distillation weights of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMap {
    pub levels: Vec<WeightGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl WeightMap {
    pub fn total_locations(&self) -> usize {
        self.levels.iter().map(|l| l.data.len()).sum()
    }

    pub fn min(&self) -> f64 {
        self.levels.iter().flat_map(|l| l.data.iter().copied()).fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.levels.iter().flat_map(|l| l.data.iter().copied()).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Rasterize instance (and optionally level) weights over the assignment
/// grids: foreground locations get their instance's weight, background gets
/// `w_bg`, and with scale weighting enabled every entry is multiplied by the
/// level's weight.
pub fn build_weight_map(
    table: &InstanceLossTable,
    targets: &TargetAssignment,
    cfg: &AidConfig,
) -> Result<WeightMap, AidError> {
    cfg.validate()?;
    if table.levels.len() != targets.levels.len() {
        return Err(AidError::ShapeMismatch(format!(
            "table has {} levels, targets {}",
            table.levels.len(),
            targets.levels.len()
        )));
    }
    let mut levels = Vec::with_capacity(targets.levels.len());
    for (li, tl) in targets.levels.iter().enumerate() {
        let level_weight = if cfg.scale_weighting { table.levels[li].weight } else { 1.0 };
        let mut data = vec![0.0; tl.h * tl.w];
        for (loc, slot) in data.iter_mut().enumerate() {
            let id = tl.instance[loc];
            let base = if id == BACKGROUND {
                cfg.w_bg
            } else {
                table.weight_of(id).ok_or(AidError::UnknownInstance(id))?
            };
            *slot = base * level_weight;
        }
        levels.push(WeightGrid { h: tl.h, w: tl.w, data });
    }
    Ok(WeightMap { levels })
}

/// Diagnostic over a grid of difficulties: weight anchors and monotonicity.
#[derive(Debug, Clone, Serialize)]
pub struct WeightBehaviorReport {
    pub alpha: f64,
    pub weight_at_zero: Option<f64>,
    pub min_weight: f64,
    pub max_weight: f64,
    /// Strict-decrease violations over the d-sorted grid (expected 0 for
    /// alpha > 0 and distinct difficulties).
    pub monotone_violations: usize,
}

impl WeightBehaviorReport {
    pub fn holds(&self) -> bool {
        self.monotone_violations == 0 && self.weight_at_zero.map(|w| w == 1.0).unwrap_or(true)
    }
}

/// Evaluate `aid_weight` over a difficulty grid and report the extreme-value
/// anchors: weight 1 at zero difficulty, vanishing weight as difficulty
/// grows, strictly decreasing in between.
pub fn extreme_weight_behavior_check(
    d_values: &[f64],
    alpha: f64,
) -> Result<WeightBehaviorReport, AidError> {
    let mut pairs: Vec<(f64, f64)> = d_values
        .iter()
        .map(|&d| aid_weight(d, alpha).map(|w| (d, w)))
        .collect::<Result<_, _>>()?;
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let weight_at_zero = pairs.iter().find(|(d, _)| *d == 0.0).map(|&(_, w)| w);
    let mut min_weight = f64::INFINITY;
    let mut max_weight = f64::NEG_INFINITY;
    let mut monotone_violations = 0;
    for (i, &(d, w)) in pairs.iter().enumerate() {
        min_weight = min_weight.min(w);
        max_weight = max_weight.max(w);
        if alpha > 0.0 && i > 0 {
            let (pd, pw) = pairs[i - 1];
            if d > pd && w >= pw {
                monotone_violations += 1;
            }
        }
    }
    Ok(WeightBehaviorReport { alpha, weight_at_zero, min_weight, max_weight, monotone_violations })
}
