//! Distillation losses and their composition with adaptive instance weights.
//!
//! Three pluggable base losses produce per-level, per-location maps: plain
//! feature imitation, an attention-guided feature loss (teacher attention
//! masks the imitation error, attention maps themselves are transferred with
//! their own weights), and a temperature-scaled KL divergence over head class
//! logits. A weight map multiplies the base map pointwise before mean
//! reduction; the weights never carry gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aid::{build_weight_map, teacher_instance_losses, AidConfig, WeightMap};
use crate::detector::{FPNFeatures, HeadOutputs, TargetAssignment, TaskLossBreakdown};
use crate::tensor::{math, Conv2d, ConvGrad, Feat, Tensor};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid distill config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Aid(#[from] crate::aid::AidError),
}

/// Which distillation signal the student imitates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    FeatureL2,
    AttentionGuided,
    HeadKl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub base_loss: BaseLoss,
    /// Attention-masked feature term weight.
    pub beta: f64,
    /// Spatial-attention transfer weight.
    pub gamma: f64,
    /// Channel-attention transfer weight.
    pub eta: f64,
    /// Attention mask / KL softening temperature.
    pub temperature_t: f64,
    pub aid: AidConfig,
    /// Learn a 1x1 student-to-teacher channel projection when widths differ.
    pub adapter_enabled: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            base_loss: BaseLoss::AttentionGuided,
            beta: 2e-2,
            gamma: 4e-4,
            eta: 4e-4,
            temperature_t: 0.1,
            aid: AidConfig::default(),
            adapter_enabled: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !(self.temperature_t.is_finite() && self.temperature_t > 0.0) {
            return Err(DistillError::InvalidConfig(format!(
                "temperature_t {} must be > 0",
                self.temperature_t
            )));
        }
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("eta", self.eta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DistillError::InvalidConfig(format!("{name} {v} must be >= 0")));
            }
        }
        self.aid.validate()?;
        Ok(())
    }
}

/// Per-location scalar grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

/// Per-level, per-location loss map of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMap {
    pub levels: Vec<ScalarGrid>,
}

impl LossMap {
    pub fn total_locations(&self) -> usize {
        self.levels.iter().map(|l| l.data.len()).sum()
    }

    pub fn sum(&self) -> f64 {
        self.levels.iter().flat_map(|l| l.data.iter()).sum()
    }
}

/// Subgradient of |x|: zero at the kink (f64::signum maps +-0.0 to +-1.0).
#[inline]
fn abs_subgrad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_levels(a: usize, b: usize, what: &str) -> Result<(), DistillError> {
    if a != b {
        return Err(DistillError::ShapeMismatch(format!("{what}: {a} vs {b} levels")));
    }
    Ok(())
}

fn adapt_features(
    student: &FPNFeatures,
    teacher: &FPNFeatures,
    adapter: Option<&Conv2d>,
) -> Result<Vec<Tensor>, DistillError> {
    check_levels(student.levels.len(), teacher.levels.len(), "features")?;
    let mut adapted = Vec::with_capacity(student.levels.len());
    for (li, (s, t)) in student.levels.iter().zip(&teacher.levels).enumerate() {
        if s.h != t.h || s.w != t.w {
            return Err(DistillError::ShapeMismatch(format!(
                "level {li}: student {}x{}, teacher {}x{}",
                s.h, s.w, t.h, t.w
            )));
        }
        let s = match adapter {
            Some(conv) => {
                if conv.c_in != s.c || conv.c_out != t.c {
                    return Err(DistillError::ShapeMismatch(format!(
                        "adapter maps {} -> {} channels but features are {} -> {}",
                        conv.c_in, conv.c_out, s.c, t.c
                    )));
                }
                conv.forward(&Feat::from_images(std::slice::from_ref(s))).image(0)
            }
            None => {
                if s.c != t.c {
                    return Err(DistillError::ShapeMismatch(format!(
                        "level {li}: student has {} channels, teacher {} and no adapter",
                        s.c, t.c
                    )));
                }
                s.clone()
            }
        };
        adapted.push(s);
    }
    Ok(adapted)
}

/// Per-location mean-squared feature difference. The adapter (when given)
/// projects student channels onto the teacher's before comparison.
pub fn feature_l2_map(
    student: &FPNFeatures,
    teacher: &FPNFeatures,
    adapter: Option<&Conv2d>,
) -> Result<LossMap, DistillError> {
    let adapted = adapt_features(student, teacher, adapter)?;
    Ok(l2_map_from_adapted(&adapted, teacher))
}

fn l2_map_from_adapted(adapted: &[Tensor], teacher: &FPNFeatures) -> LossMap {
    let levels = adapted
        .iter()
        .zip(&teacher.levels)
        .map(|(s, t)| {
            let (h, w, c) = (s.h, s.w, s.c);
            let mut data = vec![0.0; h * w];
            for ci in 0..c {
                let sp = s.channel(ci);
                let tp = t.channel(ci);
                for (slot, (a, b)) in data.iter_mut().zip(sp.iter().zip(tp)) {
                    let d = a - b;
                    *slot += d * d;
                }
            }
            let inv = 1.0 / c as f64;
            for v in &mut data {
                *v *= inv;
            }
            ScalarGrid { h, w, data }
        })
        .collect();
    LossMap { levels }
}

/// Spatial and channel attention of a feature pyramid.
///
/// Spatial attention is `softmax(mean_c |f| / T)` over locations scaled by
/// `h*w`; channel attention is `softmax(mean_loc |f| / T)` over channels
/// scaled by the channel count. Each therefore sums to its element count.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub spatial: Vec<ScalarGrid>,
    pub channel: Vec<Vec<f64>>,
}

pub fn attention_maps(feats: &FPNFeatures, temperature_t: f64) -> AttentionMaps {
    let spatial = feats
        .levels
        .iter()
        .map(|f| {
            let mut m = vec![0.0; f.h * f.w];
            for ci in 0..f.c {
                for (slot, v) in m.iter_mut().zip(f.channel(ci)) {
                    *slot += v.abs();
                }
            }
            let inv = 1.0 / f.c as f64;
            for v in &mut m {
                *v *= inv;
            }
            math::softmax_scaled(&mut m, temperature_t);
            let scale = (f.h * f.w) as f64;
            for v in &mut m {
                *v *= scale;
            }
            ScalarGrid { h: f.h, w: f.w, data: m }
        })
        .collect();
    let channel = feats
        .levels
        .iter()
        .map(|f| {
            let inv = 1.0 / (f.h * f.w) as f64;
            let mut m: Vec<f64> =
                (0..f.c).map(|ci| f.channel(ci).iter().map(|v| v.abs()).sum::<f64>() * inv).collect();
            math::softmax_scaled(&mut m, temperature_t);
            let scale = f.c as f64;
            for v in &mut m {
                *v *= scale;
            }
            m
        })
        .collect();
    AttentionMaps { spatial, channel }
}

/// Attention-guided distillation map:
/// `beta * t_spatial ⊙ (channel-attention-weighted feature L2)
///  + gamma * (spatial attention difference)^2
///  + eta * mean_c (channel attention difference)^2` (broadcast).
pub fn attention_guided_map(
    student: &FPNFeatures,
    teacher: &FPNFeatures,
    adapter: Option<&Conv2d>,
    cfg: &DistillConfig,
) -> Result<LossMap, DistillError> {
    Ok(AgEval::new(student, teacher, adapter, cfg)?.value_map(cfg))
}

/// Intermediates shared by the attention-guided value and gradient paths.
struct AgEval<'a> {
    adapted: Vec<Tensor>,
    teacher_att: AttentionMaps,
    student_att: AttentionMaps,
    teacher: &'a FPNFeatures,
}

impl<'a> AgEval<'a> {
    fn new(
        student: &FPNFeatures,
        teacher: &'a FPNFeatures,
        adapter: Option<&Conv2d>,
        cfg: &DistillConfig,
    ) -> Result<Self, DistillError> {
        cfg.validate()?;
        let adapted = adapt_features(student, teacher, adapter)?;
        let teacher_att = attention_maps(teacher, cfg.temperature_t);
        let adapted_pyramid = FPNFeatures { levels: adapted.clone() };
        let student_att = attention_maps(&adapted_pyramid, cfg.temperature_t);
        Ok(AgEval { adapted, teacher_att, student_att, teacher })
    }

    fn value_map(&self, cfg: &DistillConfig) -> LossMap {
        let levels = self
            .adapted
            .iter()
            .enumerate()
            .map(|(li, s)| {
                let (h, w, c) = (s.h, s.w, s.c);
                let tfeat = &self.teacher.levels[li];
                let ta_sp = &self.teacher_att.spatial[li].data;
                let ta_ch = &self.teacher_att.channel[li];
                let sa_sp = &self.student_att.spatial[li].data;
                let sa_ch = &self.student_att.channel[li];

                let ch_diff_sq: f64 = sa_ch
                    .iter()
                    .zip(ta_ch)
                    .map(|(a, b)| {
                        let d = a - b;
                        d * d
                    })
                    .sum::<f64>()
                    / c as f64;
                let term3 = cfg.eta * ch_diff_sq;

                let mut data = vec![0.0; h * w];
                for (loc, slot) in data.iter_mut().enumerate() {
                    let mut weighted_l2 = 0.0;
                    for ci in 0..c {
                        let d = s.data[ci * h * w + loc] - tfeat.data[ci * h * w + loc];
                        weighted_l2 += ta_ch[ci] * d * d;
                    }
                    weighted_l2 /= c as f64;
                    let sp_diff = sa_sp[loc] - ta_sp[loc];
                    *slot = cfg.beta * ta_sp[loc] * weighted_l2 + cfg.gamma * sp_diff * sp_diff + term3;
                }
                ScalarGrid { h, w, data }
            })
            .collect();
        LossMap { levels }
    }

    /// Gradient with respect to the *adapted* student features given a
    /// per-location upstream coefficient map.
    fn backward(&self, coeff: &[Vec<f64>], cfg: &DistillConfig) -> Vec<Tensor> {
        let temperature = cfg.temperature_t;
        self.adapted
            .iter()
            .enumerate()
            .map(|(li, s)| {
                let (h, w, c) = (s.h, s.w, s.c);
                let hw = h * w;
                let tfeat = &self.teacher.levels[li];
                let ta_sp = &self.teacher_att.spatial[li].data;
                let ta_ch = &self.teacher_att.channel[li];
                let sa_sp = &self.student_att.spatial[li].data;
                let sa_ch = &self.student_att.channel[li];
                let cf = &coeff[li];
                let mut d = Tensor::zeros(c, h, w);

                // term1: masked feature imitation
                for ci in 0..c {
                    let scale = cfg.beta * 2.0 / c as f64 * ta_ch[ci];
                    for loc in 0..hw {
                        let diff = s.data[ci * hw + loc] - tfeat.data[ci * hw + loc];
                        d.data[ci * hw + loc] += cf[loc] * scale * ta_sp[loc] * diff;
                    }
                }

                // term2: spatial-attention transfer, through softmax and |.|
                let sp_scale = hw as f64;
                let p_sp: Vec<f64> = sa_sp.iter().map(|v| v / sp_scale).collect();
                let g_sa: Vec<f64> =
                    (0..hw).map(|loc| cf[loc] * 2.0 * cfg.gamma * (sa_sp[loc] - ta_sp[loc])).collect();
                let dot: f64 = g_sa.iter().zip(&p_sp).map(|(g, p)| g * p).sum();
                let d_msp: Vec<f64> = (0..hw)
                    .map(|loc| (sp_scale / temperature) * p_sp[loc] * (g_sa[loc] - dot))
                    .collect();
                for ci in 0..c {
                    for loc in 0..hw {
                        let sgn = abs_subgrad(s.data[ci * hw + loc]);
                        d.data[ci * hw + loc] += d_msp[loc] * sgn / c as f64;
                    }
                }

                // term3: channel-attention transfer (same value at every
                // location, so the coefficients sum)
                let coeff_sum: f64 = cf.iter().sum();
                let p_ch: Vec<f64> = sa_ch.iter().map(|v| v / c as f64).collect();
                let g_ca: Vec<f64> = (0..c)
                    .map(|ci| coeff_sum * 2.0 * cfg.eta / c as f64 * (sa_ch[ci] - ta_ch[ci]))
                    .collect();
                let dot_ch: f64 = g_ca.iter().zip(&p_ch).map(|(g, p)| g * p).sum();
                for ci in 0..c {
                    let d_mch = (c as f64 / temperature) * p_ch[ci] * (g_ca[ci] - dot_ch);
                    for loc in 0..hw {
                        let sgn = abs_subgrad(s.data[ci * hw + loc]);
                        d.data[ci * hw + loc] += d_mch * sgn / hw as f64;
                    }
                }
                d
            })
            .collect()
    }
}

/// Temperature-softened KL divergence (teacher given student) per location
/// over class logits, scaled by the squared temperature.
pub fn head_kl_map(
    student: &HeadOutputs,
    teacher: &HeadOutputs,
    temperature: f64,
) -> Result<LossMap, DistillError> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(DistillError::InvalidConfig(format!("temperature {temperature} must be > 0")));
    }
    check_levels(student.levels.len(), teacher.levels.len(), "head outputs")?;
    let mut levels = Vec::with_capacity(student.levels.len());
    for (li, (s, t)) in student.levels.iter().zip(&teacher.levels).enumerate() {
        let (h, w, c) = (s.cls_logits.h, s.cls_logits.w, s.cls_logits.c);
        if t.cls_logits.h != h || t.cls_logits.w != w || t.cls_logits.c != c {
            return Err(DistillError::ShapeMismatch(format!("head level {li} logits differ in shape")));
        }
        let mut data = vec![0.0; h * w];
        let mut zs = vec![0.0; c];
        let mut zt = vec![0.0; c];
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    zs[ci] = s.cls_logits.get(ci, y, x);
                    zt[ci] = t.cls_logits.get(ci, y, x);
                }
                math::softmax_scaled(&mut zs, temperature);
                math::softmax_scaled(&mut zt, temperature);
                let mut kl = 0.0;
                for ci in 0..c {
                    if zt[ci] > 0.0 {
                        kl += zt[ci] * (zt[ci].ln() - zs[ci].ln());
                    }
                }
                data[y * w + x] = temperature * temperature * kl.max(0.0);
            }
        }
        levels.push(ScalarGrid { h, w, data });
    }
    Ok(LossMap { levels })
}

fn head_kl_backward(
    student: &HeadOutputs,
    teacher: &HeadOutputs,
    temperature: f64,
    coeff: &[Vec<f64>],
) -> Vec<Tensor> {
    student
        .levels
        .iter()
        .zip(&teacher.levels)
        .zip(coeff)
        .map(|((s, t), cf)| {
            let (h, w, c) = (s.cls_logits.h, s.cls_logits.w, s.cls_logits.c);
            let mut d = Tensor::zeros(c, h, w);
            let mut zs = vec![0.0; c];
            let mut zt = vec![0.0; c];
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        zs[ci] = s.cls_logits.get(ci, y, x);
                        zt[ci] = t.cls_logits.get(ci, y, x);
                    }
                    math::softmax_scaled(&mut zs, temperature);
                    math::softmax_scaled(&mut zt, temperature);
                    for ci in 0..c {
                        // d(T^2 KL)/dz_s = T (q_s - q_t)
                        d.set(ci, y, x, cf[y * w + x] * temperature * (zs[ci] - zt[ci]));
                    }
                }
            }
            d
        })
        .collect()
}

/// Weighted mean of a base map: `sum(w * base) / total_locations`. Weights
/// enter as constants.
pub fn aid_distill_loss(base: &LossMap, weights: &WeightMap) -> Result<f64, DistillError> {
    check_levels(base.levels.len(), weights.levels.len(), "loss/weight maps")?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (li, (b, w)) in base.levels.iter().zip(&weights.levels).enumerate() {
        if b.data.len() != w.data.len() {
            return Err(DistillError::ShapeMismatch(format!(
                "level {li}: base has {} locations, weights {}",
                b.data.len(),
                w.data.len()
            )));
        }
        for (bv, wv) in b.data.iter().zip(&w.data) {
            sum += bv * wv;
        }
        count += b.data.len();
    }
    let value = sum / count.max(1) as f64;
    if !value.is_finite() {
        return Err(DistillError::NonFinite("aid distillation loss".into()));
    }
    Ok(value)
}

/// Student objective: task loss plus `lambda` times the weighted distillation
/// loss.
pub fn student_total_loss(
    task: &TaskLossBreakdown,
    aid_distill: f64,
    lambda: f64,
) -> Result<f64, DistillError> {
    let total = task.total + lambda * aid_distill;
    if !total.is_finite() {
        return Err(DistillError::NonFinite(format!(
            "student total loss (task {}, distill {aid_distill}, lambda {lambda})",
            task.total
        )));
    }
    Ok(total)
}

/// Everything the training step needs from one image's distillation pass:
/// the scalar loss and gradients with respect to the student-owned inputs.
pub struct DistillGrads {
    pub value: f64,
    /// With respect to the raw student FPN features (before the adapter).
    pub d_features: Vec<Tensor>,
    /// With respect to student class logits (head-KL base loss only).
    pub d_cls: Option<Vec<Tensor>>,
    /// Adapter parameter gradients, when an adapter is in play.
    pub adapter: Option<ConvGrad>,
}

/// Compute the weighted distillation loss and its gradients. `upstream`
/// scales every gradient (the training loop passes `lambda`).
#[allow(clippy::too_many_arguments)]
pub fn distill_with_grad(
    student_feats: &FPNFeatures,
    student_outputs: &HeadOutputs,
    teacher_feats: &FPNFeatures,
    teacher_outputs: &HeadOutputs,
    weights: &WeightMap,
    adapter: Option<&Conv2d>,
    cfg: &DistillConfig,
    upstream: f64,
) -> Result<DistillGrads, DistillError> {
    cfg.validate()?;
    let n_total: usize = weights.total_locations().max(1);
    // coeff(loc) = upstream * w(loc) / N ; the chain factor applied to the
    // base map's gradient.
    let coeff: Vec<Vec<f64>> = weights
        .levels
        .iter()
        .map(|l| l.data.iter().map(|w| upstream * w / n_total as f64).collect())
        .collect();

    match cfg.base_loss {
        BaseLoss::FeatureL2 => {
            let adapted = adapt_features(student_feats, teacher_feats, adapter)?;
            let map = l2_map_from_adapted(&adapted, teacher_feats);
            let value = aid_distill_loss(&map, weights)?;
            let d_adapted: Vec<Tensor> = adapted
                .iter()
                .zip(&teacher_feats.levels)
                .zip(&coeff)
                .map(|((s, t), cf)| {
                    let (h, w, c) = (s.h, s.w, s.c);
                    let hw = h * w;
                    let mut d = Tensor::zeros(c, h, w);
                    for ci in 0..c {
                        for loc in 0..hw {
                            let diff = s.data[ci * hw + loc] - t.data[ci * hw + loc];
                            d.data[ci * hw + loc] = cf[loc] * 2.0 * diff / c as f64;
                        }
                    }
                    d
                })
                .collect();
            let (d_features, adapter_grad) = through_adapter(student_feats, d_adapted, adapter);
            Ok(DistillGrads { value, d_features, d_cls: None, adapter: adapter_grad })
        }
        BaseLoss::AttentionGuided => {
            let eval = AgEval::new(student_feats, teacher_feats, adapter, cfg)?;
            let map = eval.value_map(cfg);
            let value = aid_distill_loss(&map, weights)?;
            let d_adapted = eval.backward(&coeff, cfg);
            let (d_features, adapter_grad) = through_adapter(student_feats, d_adapted, adapter);
            Ok(DistillGrads { value, d_features, d_cls: None, adapter: adapter_grad })
        }
        BaseLoss::HeadKl => {
            let map = head_kl_map(student_outputs, teacher_outputs, cfg.temperature_t)?;
            let value = aid_distill_loss(&map, weights)?;
            let d_cls = head_kl_backward(student_outputs, teacher_outputs, cfg.temperature_t, &coeff);
            let d_features = student_feats
                .levels
                .iter()
                .map(|f| Tensor::zeros(f.c, f.h, f.w))
                .collect();
            Ok(DistillGrads { value, d_features, d_cls: Some(d_cls), adapter: None })
        }
    }
}

fn through_adapter(
    student_feats: &FPNFeatures,
    d_adapted: Vec<Tensor>,
    adapter: Option<&Conv2d>,
) -> (Vec<Tensor>, Option<ConvGrad>) {
    match adapter {
        None => (d_adapted, None),
        Some(conv) => {
            let mut grad = conv.zero_grad();
            let d_features = student_feats
                .levels
                .iter()
                .zip(d_adapted)
                .map(|(s, d)| {
                    let x = Feat::from_images(std::slice::from_ref(s));
                    let dy = Feat::from_images(std::slice::from_ref(&d));
                    conv.backward(&x, &dy, &mut grad).image(0)
                })
                .collect();
            (d_features, Some(grad))
        }
    }
}

/// Self-distillation objective: the previous model of the *same architecture*
/// plays the teacher role, weights come from its own task losses, and no
/// channel adapter is involved.
pub fn self_distill_loss(
    new_task: &TaskLossBreakdown,
    old: (&FPNFeatures, &HeadOutputs),
    new: (&FPNFeatures, &HeadOutputs),
    targets: &TargetAssignment,
    cfg: &DistillConfig,
) -> Result<f64, DistillError> {
    cfg.validate()?;
    let (old_feats, old_outputs) = old;
    let (new_feats, new_outputs) = new;
    check_levels(old_feats.levels.len(), new_feats.levels.len(), "self-distill features")?;
    for (li, (o, n)) in old_feats.levels.iter().zip(&new_feats.levels).enumerate() {
        if o.c != n.c || o.h != n.h || o.w != n.w {
            return Err(DistillError::ArchitectureMismatch(format!(
                "self-distillation requires identical architectures (level {li}: {}x{}x{} vs {}x{}x{})",
                o.c, o.h, o.w, n.c, n.h, n.w
            )));
        }
    }
    if old_outputs.num_classes() != new_outputs.num_classes() {
        return Err(DistillError::ArchitectureMismatch(
            "self-distillation class count differs".into(),
        ));
    }
    let table = teacher_instance_losses(old_outputs, targets, &cfg.aid)?;
    let weights = build_weight_map(&table, targets, &cfg.aid)?;
    let base = match cfg.base_loss {
        BaseLoss::FeatureL2 => feature_l2_map(new_feats, old_feats, None)?,
        BaseLoss::AttentionGuided => attention_guided_map(new_feats, old_feats, None, cfg)?,
        BaseLoss::HeadKl => head_kl_map(new_outputs, old_outputs, cfg.temperature_t)?,
    };
    let distill = aid_distill_loss(&base, &weights)?;
    student_total_loss(new_task, distill, cfg.aid.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_pyramid(c: usize, dims: &[(usize, usize)], seed: u64) -> FPNFeatures {
        let mut rng = crate::rng::rng_for(seed, &[91]);
        FPNFeatures {
            levels: dims
                .iter()
                .map(|&(h, w)| {
                    let mut t = Tensor::zeros(c, h, w);
                    for v in &mut t.data {
                        *v = rng.gen_range(-1.5..1.5);
                    }
                    t
                })
                .collect(),
        }
    }

    fn uniform_weights(dims: &[(usize, usize)]) -> WeightMap {
        WeightMap {
            levels: dims
                .iter()
                .map(|&(h, w)| crate::aid::WeightGrid { h, w, data: vec![1.0; h * w] })
                .collect(),
        }
    }

    #[test]
    fn identical_features_give_zero_maps() {
        let dims = [(4, 4), (2, 2)];
        let f = rand_pyramid(3, &dims, 1);
        let l2 = feature_l2_map(&f, &f, None).unwrap();
        assert!(l2.levels.iter().all(|l| l.data.iter().all(|&v| v == 0.0)));
        let ag = attention_guided_map(&f, &f, None, &DistillConfig::default()).unwrap();
        assert!(ag.levels.iter().all(|l| l.data.iter().all(|&v| v.abs() < 1e-18)));
    }

    #[test]
    fn single_location_l2_value() {
        let s = FPNFeatures { levels: vec![Tensor::from_vec(1, 1, 1, vec![2.0])] };
        let t = FPNFeatures { levels: vec![Tensor::from_vec(1, 1, 1, vec![5.0])] };
        let map = feature_l2_map(&s, &t, None).unwrap();
        assert_eq!(map.levels[0].data[0], 9.0);
    }

    #[test]
    fn l2_matches_triple_loop_oracle() {
        let dims = [(3, 4), (2, 2)];
        let s = rand_pyramid(4, &dims, 2);
        let t = rand_pyramid(4, &dims, 3);
        let map = feature_l2_map(&s, &t, None).unwrap();
        for (li, &(h, w)) in dims.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for c in 0..4 {
                        let d = s.levels[li].get(c, y, x) - t.levels[li].get(c, y, x);
                        acc += d * d;
                    }
                    acc /= 4.0;
                    assert!((map.levels[li].data[y * w + x] - acc).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn constant_features_give_uniform_attention() {
        let f = FPNFeatures { levels: vec![Tensor::from_vec(3, 2, 4, vec![0.7; 24])] };
        let att = attention_maps(&f, 0.5);
        assert!(att.spatial[0].data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(att.channel[0].iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn dominant_location_concentrates_attention_at_low_temperature() {
        let mut t = Tensor::zeros(1, 2, 2);
        t.data = vec![5.0, 0.1, 0.1, 0.1];
        let f = FPNFeatures { levels: vec![t] };
        let att = attention_maps(&f, 0.01);
        assert!((att.spatial[0].data[0] - 4.0).abs() < 1e-9);
        assert!(att.spatial[0].data[1] < 1e-9);
    }

    #[test]
    fn attention_sums_match_element_counts() {
        let dims = [(5, 3), (2, 2)];
        let f = rand_pyramid(6, &dims, 4);
        let att = attention_maps(&f, 0.5);
        for (li, &(h, w)) in dims.iter().enumerate() {
            let s: f64 = att.spatial[li].data.iter().sum();
            assert!((s - (h * w) as f64).abs() < 1e-5);
            let c: f64 = att.channel[li].iter().sum();
            assert!((c - 6.0).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_guided_reduces_to_l2_under_uniform_teacher_attention() {
        // Constant teacher features make both teacher attentions exactly
        // uniform; with beta=1, gamma=eta=0 the map must equal feature L2.
        let dims = [(4, 4), (2, 2)];
        let s = rand_pyramid(3, &dims, 5);
        let t = FPNFeatures {
            levels: dims.iter().map(|&(h, w)| Tensor::from_vec(3, h, w, vec![0.3; 3 * h * w])).collect(),
        };
        let cfg = DistillConfig { beta: 1.0, gamma: 0.0, eta: 0.0, ..DistillConfig::default() };
        let ag = attention_guided_map(&s, &t, None, &cfg).unwrap();
        let l2 = feature_l2_map(&s, &t, None).unwrap();
        for (a, b) in ag.levels.iter().zip(&l2.levels) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_guided_matches_term_by_term_oracle() {
        let dims = [(3, 3)];
        let s = rand_pyramid(4, &dims, 6);
        let t = rand_pyramid(4, &dims, 7);
        let cfg = DistillConfig {
            beta: 0.7,
            gamma: 0.3,
            eta: 0.2,
            temperature_t: 0.5,
            ..DistillConfig::default()
        };
        let map = attention_guided_map(&s, &t, None, &cfg).unwrap();

        // Assemble the three terms independently.
        let t_att = attention_maps(&t, cfg.temperature_t);
        let s_att = attention_maps(&s, cfg.temperature_t);
        let (h, w, c) = (3, 3, 4);
        for loc in 0..h * w {
            let mut term1 = 0.0;
            for ci in 0..c {
                let d = s.levels[0].data[ci * h * w + loc] - t.levels[0].data[ci * h * w + loc];
                term1 += t_att.channel[0][ci] * d * d;
            }
            term1 = cfg.beta * t_att.spatial[0].data[loc] * term1 / c as f64;
            let sd = s_att.spatial[0].data[loc] - t_att.spatial[0].data[loc];
            let term2 = cfg.gamma * sd * sd;
            let term3 = cfg.eta
                * s_att.channel[0]
                    .iter()
                    .zip(&t_att.channel[0])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                / c as f64;
            let want = term1 + term2 + term3;
            assert!((map.levels[0].data[loc] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn head_kl_values() {
        use crate::detector::HeadLevel;
        let mk = |logits: Vec<f64>| HeadOutputs {
            levels: vec![HeadLevel {
                stride: 8,
                cls_logits: Tensor::from_vec(2, 1, 1, logits),
                box_distances: Tensor::from_vec(4, 1, 1, vec![1.0; 4]),
                obj_logits: Tensor::from_vec(1, 1, 1, vec![0.0]),
            }],
        };
        // identical logits -> zero
        let a = mk(vec![0.4, -1.2]);
        assert_eq!(head_kl_map(&a, &a, 1.0).unwrap().levels[0].data[0], 0.0);
        // teacher one-hot limit vs uniform student, C=2, T=1 -> ln 2
        let teacher = mk(vec![60.0, 0.0]);
        let student = mk(vec![0.0, 0.0]);
        let v = head_kl_map(&student, &teacher, 1.0).unwrap().levels[0].data[0];
        assert!((v - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn head_kl_matches_scalar_oracle() {
        use crate::detector::HeadLevel;
        let mut rng = crate::rng::rng_for(8, &[91]);
        let c = 5;
        let (h, w) = (2, 3);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mut t = Tensor::zeros(c, h, w);
            for v in &mut t.data {
                *v = rng.gen_range(-2.0..2.0);
            }
            HeadOutputs {
                levels: vec![HeadLevel {
                    stride: 8,
                    cls_logits: t,
                    box_distances: Tensor::from_vec(4, h, w, vec![1.0; 4 * h * w]),
                    obj_logits: Tensor::zeros(1, h, w),
                }],
            }
        };
        let s = mk(&mut rng);
        let t = mk(&mut rng);
        let temp = 2.0;
        let map = head_kl_map(&s, &t, temp).unwrap();
        for y in 0..h {
            for x in 0..w {
                let softmax = |out: &HeadOutputs| {
                    let mut z: Vec<f64> =
                        (0..c).map(|ci| out.levels[0].cls_logits.get(ci, y, x) / temp).collect();
                    let m = z.iter().cloned().fold(f64::MIN, f64::max);
                    let exps: Vec<f64> = z.iter_mut().map(|v| (*v - m).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    exps.into_iter().map(|e| e / sum).collect::<Vec<f64>>()
                };
                let qs = softmax(&s);
                let qt = softmax(&t);
                let kl: f64 =
                    qt.iter().zip(&qs).map(|(a, b)| a * (a.ln() - b.ln())).sum::<f64>() * temp * temp;
                assert!((map.levels[0].data[y * w + x] - kl).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn weighted_reduction_behaviour() {
        let dims = [(2, 2), (1, 1)];
        let base = LossMap {
            levels: dims
                .iter()
                .enumerate()
                .map(|(i, &(h, w))| ScalarGrid {
                    h,
                    w,
                    data: (0..h * w).map(|j| (i + 1) as f64 * (j + 1) as f64).collect(),
                })
                .collect(),
        };
        let ones = uniform_weights(&dims);
        let uniform = aid_distill_loss(&base, &ones).unwrap();
        let mean = base.sum() / base.total_locations() as f64;
        assert_eq!(uniform, mean);

        let mut halves = ones.clone();
        for l in &mut halves.levels {
            for v in &mut l.data {
                *v = 0.5;
            }
        }
        let halved = aid_distill_loss(&base, &halves).unwrap();
        assert!((halved - 0.5 * uniform).abs() < 1e-15);

        // brute-force dot product oracle
        let mut rng = crate::rng::rng_for(9, &[91]);
        let mut wmap = ones.clone();
        for l in &mut wmap.levels {
            for v in &mut l.data {
                *v = rng.gen_range(0.1..1.0);
            }
        }
        let got = aid_distill_loss(&base, &wmap).unwrap();
        let mut dot = 0.0;
        let mut n = 0;
        for (b, wl) in base.levels.iter().zip(&wmap.levels) {
            for (x, y) in b.data.iter().zip(&wl.data) {
                dot += x * y;
                n += 1;
            }
        }
        assert!((got - dot / n as f64).abs() < 1e-7);
    }

    #[test]
    fn total_loss_arithmetic() {
        let task = TaskLossBreakdown {
            levels: vec![],
            cls_sum: 0.0,
            reg_sum: 0.0,
            obj_sum: 0.0,
            num_foreground: 0,
            total: 1.5,
        };
        assert_eq!(student_total_loss(&task, 0.7, 0.0).unwrap(), 1.5);
        assert_eq!(student_total_loss(&task, 0.0, 1.0).unwrap(), 1.5);
        assert!((student_total_loss(&task, 0.4, 2.0).unwrap() - 2.3).abs() < 1e-15);
        assert!(student_total_loss(&task, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn distill_loss_monotone_in_difficulty() {
        // Raising one instance's difficulty can only lower (or keep) the loss.
        let dims = [(2, 2)];
        let base = LossMap {
            levels: vec![ScalarGrid { h: 2, w: 2, data: vec![0.5, 1.0, 2.0, 0.25] }],
        };
        let weight_for = |d: f64| crate::aid::WeightGrid {
            h: 2,
            w: 2,
            data: vec![(-0.1f64 * d).exp(), 1.0, 1.0, 1.0],
        };
        let mut prev = f64::INFINITY;
        for step in 0..20 {
            let d = step as f64;
            let wm = WeightMap { levels: vec![weight_for(d)] };
            let v = aid_distill_loss(&base, &wm).unwrap();
            assert!(v <= prev + 1e-15);
            prev = v;
        }
        let _ = uniform_weights(&dims);
    }
}
