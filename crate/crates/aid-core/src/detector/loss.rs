//! Detection task losses and their analytic gradients.
//!
//! Per location: focal loss over class logits (gamma 2, alpha 0.25, the alpha
//! factor applied to positive and negative terms alike), IoU loss on the
//! four box distances at foreground locations, and binary cross-entropy on
//! the objectness logit. The per-image total is the component sums divided
//! by the foreground count (floored at one), so per-instance losses stay
//! comparable across images.

use super::{DetectorError, HeadOutputs, TargetAssignment};
use crate::detector::model::HeadGrad;
use crate::tensor::math::{ln_sigmoid, sigmoid};

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

/// Focal loss value and d/dz for a single logit. `positive` selects the
/// target.
pub(crate) fn focal_loss(z: f64, positive: bool) -> (f64, f64) {
    let p = sigmoid(z);
    let q = sigmoid(-z); // 1 - p
    if positive {
        let ln_p = ln_sigmoid(z);
        let value = -FOCAL_ALPHA * q * q * ln_p;
        let grad = FOCAL_ALPHA * (FOCAL_GAMMA * p * q * q * ln_p - q * q * q);
        (value, grad)
    } else {
        let ln_q = ln_sigmoid(-z);
        let value = -FOCAL_ALPHA * p * p * ln_q;
        let grad = FOCAL_ALPHA * (-FOCAL_GAMMA * p * p * q * ln_q + p * p * p);
        (value, grad)
    }
}

/// Binary cross-entropy with logits; returns (value, d/dz).
pub(crate) fn bce_logits(z: f64, target: f64) -> (f64, f64) {
    let value = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
    (value, sigmoid(z) - target)
}

/// IoU loss `1 - IoU` between predicted and target distance quadruples
/// (left/top/right/bottom from a shared center, all positive). Returns the
/// value and the gradient with respect to the predicted distances.
pub(crate) fn iou_loss(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let [l, t, r, b] = pred;
    let [lt, tt, rt, bt] = target;
    let iw = l.min(lt) + r.min(rt);
    let ih = t.min(tt) + b.min(bt);
    let inter = iw * ih;
    let area_p = (l + r) * (t + b);
    let area_t = (lt + rt) * (tt + bt);
    let union = area_p + area_t - inter;
    let iou = inter / union;

    // dI/d{l,r} = [pred < target] * ih ; dA/d{l,r} = (t+b); analogous for t,b.
    let mut grad = [0.0; 4];
    let d_inter = [
        if l < lt { ih } else { 0.0 },
        if t < tt { iw } else { 0.0 },
        if r < rt { ih } else { 0.0 },
        if b < bt { iw } else { 0.0 },
    ];
    let d_area = [t + b, l + r, t + b, l + r];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        let d_iou = (d_inter[i] * union - inter * d_union) / (union * union);
        grad[i] = -d_iou;
    }
    (1.0 - iou, grad)
}

/// Per-location loss maps of one FPN level.
#[derive(Debug, Clone)]
pub struct LevelLoss {
    pub h: usize,
    pub w: usize,
    pub cls: Vec<f64>,
    pub reg: Vec<f64>,
    pub obj: Vec<f64>,
}

/// Task-loss maps and the normalized per-image total.
#[derive(Debug, Clone)]
pub struct TaskLossBreakdown {
    pub levels: Vec<LevelLoss>,
    pub cls_sum: f64,
    pub reg_sum: f64,
    pub obj_sum: f64,
    pub num_foreground: usize,
    /// `(cls_sum + reg_sum + obj_sum) / max(1, num_foreground)`
    pub total: f64,
}

impl TaskLossBreakdown {
    /// Sum of the selected per-location components at one location.
    pub fn location_loss(&self, level: usize, loc: usize, cls: bool, reg: bool, obj: bool) -> f64 {
        let l = &self.levels[level];
        let mut v = 0.0;
        if cls {
            v += l.cls[loc];
        }
        if reg {
            v += l.reg[loc];
        }
        if obj {
            v += l.obj[loc];
        }
        v
    }
}

fn check_finite(
    v: f64,
    component: &'static str,
    level: usize,
    y: usize,
    x: usize,
) -> Result<f64, DetectorError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DetectorError::NonFiniteLoss { component, level, y, x })
    }
}

/// Detection task loss of one image.
pub fn task_loss(
    outputs: &HeadOutputs,
    targets: &TargetAssignment,
) -> Result<TaskLossBreakdown, DetectorError> {
    compute(outputs, targets, None)
}

/// Task loss plus gradients with respect to the head outputs (class/objectness
/// logits, box distances), already divided by the foreground normalizer.
pub fn task_loss_with_grad(
    outputs: &HeadOutputs,
    targets: &TargetAssignment,
) -> Result<(TaskLossBreakdown, Vec<HeadGrad>), DetectorError> {
    let mut grads: Vec<HeadGrad> = targets
        .levels
        .iter()
        .map(|l| HeadGrad::zeros(outputs.num_classes(), l.h, l.w))
        .collect();
    let breakdown = compute(outputs, targets, Some(&mut grads))?;
    Ok((breakdown, grads))
}

fn compute(
    outputs: &HeadOutputs,
    targets: &TargetAssignment,
    mut grads: Option<&mut Vec<HeadGrad>>,
) -> Result<TaskLossBreakdown, DetectorError> {
    if outputs.levels.len() != targets.levels.len() {
        return Err(DetectorError::ShapeMismatch(format!(
            "outputs have {} levels, targets {}",
            outputs.levels.len(),
            targets.levels.len()
        )));
    }
    let norm = targets.norm();
    let num_classes = outputs.num_classes();
    let mut levels = Vec::with_capacity(outputs.levels.len());
    let (mut cls_sum, mut reg_sum, mut obj_sum) = (0.0, 0.0, 0.0);

    for (li, (out, tgt)) in outputs.levels.iter().zip(&targets.levels).enumerate() {
        if out.cls_logits.h != tgt.h || out.cls_logits.w != tgt.w {
            return Err(DetectorError::ShapeMismatch(format!(
                "level {li}: outputs {}x{}, targets {}x{}",
                out.cls_logits.h, out.cls_logits.w, tgt.h, tgt.w
            )));
        }
        let (h, w) = (tgt.h, tgt.w);
        let mut level = LevelLoss {
            h,
            w,
            cls: vec![0.0; h * w],
            reg: vec![0.0; h * w],
            obj: vec![0.0; h * w],
        };
        for y in 0..h {
            for x in 0..w {
                let loc = tgt.loc(y, x);
                let fg = tgt.is_foreground(loc);

                let mut cls_here = 0.0;
                for c in 0..num_classes {
                    let z = out.cls_logits.get(c, y, x);
                    let positive = fg && tgt.cls[loc] == c as u32;
                    let (v, g) = focal_loss(z, positive);
                    cls_here += v;
                    if let Some(gr) = grads.as_deref_mut() {
                        gr[li].d_cls.set(c, y, x, g / norm);
                    }
                }
                level.cls[loc] = check_finite(cls_here, "classification", li, y, x)?;

                if fg {
                    let pred = [
                        out.box_distances.get(0, y, x),
                        out.box_distances.get(1, y, x),
                        out.box_distances.get(2, y, x),
                        out.box_distances.get(3, y, x),
                    ];
                    let (v, g) = iou_loss(pred, tgt.distances[loc]);
                    level.reg[loc] = check_finite(v, "regression", li, y, x)?;
                    if let Some(gr) = grads.as_deref_mut() {
                        for i in 0..4 {
                            gr[li].d_reg.set(i, y, x, g[i] / norm);
                        }
                    }
                }

                let z = out.obj_logits.get(0, y, x);
                let (v, g) = bce_logits(z, tgt.objectness[loc]);
                level.obj[loc] = check_finite(v, "objectness", li, y, x)?;
                if let Some(gr) = grads.as_deref_mut() {
                    gr[li].d_obj.set(0, y, x, g / norm);
                }
            }
        }
        cls_sum += level.cls.iter().sum::<f64>();
        reg_sum += level.reg.iter().sum::<f64>();
        obj_sum += level.obj.iter().sum::<f64>();
        levels.push(level);
    }

    let total = (cls_sum + reg_sum + obj_sum) / norm;
    Ok(TaskLossBreakdown {
        levels,
        cls_sum,
        reg_sum,
        obj_sum,
        num_foreground: targets.num_foreground,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{assign_targets, DetectorSpec, HeadLevel};
    use crate::tensor::Tensor;
    use crate::types::{BoundingBox, Instance};
    use rand::Rng;

    fn scalar_fd(f: impl Fn(f64) -> f64, z: f64) -> f64 {
        let h = 1e-6;
        (f(z + h) - f(z - h)) / (2.0 * h)
    }

    #[test]
    fn focal_matches_scalar_reference() {
        // Independent reference built directly from the definition
        // L = -alpha * (1 - p_t)^gamma * ln(p_t).
        let reference = |z: f64, positive: bool| {
            let p = 1.0 / (1.0 + (-z as f64).exp());
            let pt = if positive { p } else { 1.0 - p };
            -0.25 * (1.0 - pt).powi(2) * pt.ln()
        };
        for &z in &[-4.0, -1.0, -0.3, 0.0, 0.5, 2.0, 6.0] {
            for &pos in &[true, false] {
                let (v, g) = focal_loss(z, pos);
                assert!((v - reference(z, pos)).abs() < 1e-12);
                let fd = scalar_fd(|z| focal_loss(z, pos).0, z);
                assert!((g - fd).abs() < 1e-6, "z={z} pos={pos}: {g} vs {fd}");
            }
        }
        // The spec's worked value: p = 0.5 background location.
        let (v, _) = focal_loss(0.0, false);
        assert!((v - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_finite_differences() {
        for &z in &[-30.0, -2.0, 0.0, 1.5, 30.0] {
            for &t in &[0.0, 1.0] {
                let (v, g) = bce_logits(z, t);
                assert!(v >= 0.0);
                if z.abs() < 10.0 {
                    let fd = scalar_fd(|z| bce_logits(z, t).0, z);
                    assert!((g - fd).abs() < 1e-6);
                }
            }
        }
        assert!((bce_logits(0.0, 0.0).0 - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn iou_loss_gradient_matches_fd() {
        let mut rng = crate::rng::rng_for(3, &[33]);
        for _ in 0..200 {
            let rand4 = |rng: &mut rand_chacha::ChaCha8Rng| {
                [
                    rng.gen_range(0.2..4.0),
                    rng.gen_range(0.2..4.0),
                    rng.gen_range(0.2..4.0),
                    rng.gen_range(0.2..4.0),
                ]
            };
            let pred = rand4(&mut rng);
            let tgt = rand4(&mut rng);
            let (v, g) = iou_loss(pred, tgt);
            assert!((0.0..=1.0).contains(&v));
            for i in 0..4 {
                let h = 1e-7;
                let mut up = pred;
                up[i] += h;
                let mut dn = pred;
                dn[i] -= h;
                let fd = (iou_loss(up, tgt).0 - iou_loss(dn, tgt).0) / (2.0 * h);
                assert!((g[i] - fd).abs() < 1e-5, "{:?} vs fd {fd}", g[i]);
            }
        }
        assert_eq!(iou_loss([1.0, 2.0, 3.0, 0.5], [1.0, 2.0, 3.0, 0.5]).0, 0.0);
    }

    fn uniform_outputs(spec: &DetectorSpec, h: usize, w: usize, logit: f64) -> HeadOutputs {
        let levels = spec
            .fpn_strides
            .iter()
            .enumerate()
            .map(|(li, &s)| {
                let (lh, lw) = spec.level_dims(li, h, w);
                HeadLevel {
                    stride: s,
                    cls_logits: Tensor::from_vec(
                        spec.num_classes,
                        lh,
                        lw,
                        vec![logit; spec.num_classes * lh * lw],
                    ),
                    box_distances: Tensor::from_vec(4, lh, lw, vec![1.0; 4 * lh * lw]),
                    obj_logits: Tensor::from_vec(1, lh, lw, vec![logit; lh * lw]),
                }
            })
            .collect();
        HeadOutputs { levels }
    }

    #[test]
    fn all_background_at_half_probability_matches_oracle() {
        let spec = DetectorSpec::new(1.0, 3);
        let outputs = uniform_outputs(&spec, 64, 64, 0.0);
        let targets = assign_targets(&[], &spec, 64, 64);
        let breakdown = task_loss(&outputs, &targets).unwrap();

        // Scalar brute-force oracle over every location.
        let per_class = 0.25 * 0.25 * std::f64::consts::LN_2;
        let per_loc_obj = std::f64::consts::LN_2;
        let num_locs: usize = targets.levels.iter().map(|l| l.h * l.w).sum();
        let expect_total = (num_locs as f64) * (3.0 * per_class + per_loc_obj) / 1.0;
        assert!((breakdown.total - expect_total).abs() < 1e-9);
        assert_eq!(breakdown.num_foreground, 0);
        for level in &breakdown.levels {
            for &v in &level.cls {
                assert!((v - 3.0 * per_class).abs() < 1e-12);
            }
            assert!(level.reg.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn perfect_predictions_drive_loss_to_zero() {
        let spec = DetectorSpec::new(1.0, 2);
        let instance = Instance {
            instance_id: 0,
            class_id: 1,
            bbox: BoundingBox::new(16.0, 16.0, 48.0, 48.0).unwrap(),
        };
        let targets = assign_targets(&[instance], &spec, 64, 64);
        let big = 40.0;
        let levels = targets
            .levels
            .iter()
            .map(|tl| {
                let mut cls = Tensor::from_vec(2, tl.h, tl.w, vec![-big; 2 * tl.h * tl.w]);
                let mut reg = Tensor::from_vec(4, tl.h, tl.w, vec![1.0; 4 * tl.h * tl.w]);
                let mut obj = Tensor::from_vec(1, tl.h, tl.w, vec![-big; tl.h * tl.w]);
                for y in 0..tl.h {
                    for x in 0..tl.w {
                        let loc = tl.loc(y, x);
                        if tl.is_foreground(loc) {
                            cls.set(tl.cls[loc] as usize, y, x, big);
                            obj.set(0, y, x, big);
                            for i in 0..4 {
                                reg.set(i, y, x, tl.distances[loc][i]);
                            }
                        }
                    }
                }
                HeadLevel { stride: tl.stride, cls_logits: cls, box_distances: reg, obj_logits: obj }
            })
            .collect();
        let outputs = HeadOutputs { levels };
        let breakdown = task_loss(&outputs, &targets).unwrap();
        assert!(breakdown.total < 1e-10, "total {}", breakdown.total);
        // exact-match regression contributes exactly zero at fg locations
        for level in &breakdown.levels {
            assert!(level.reg.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn non_finite_logits_are_reported() {
        let spec = DetectorSpec::new(1.0, 3);
        let mut outputs = uniform_outputs(&spec, 64, 64, 0.0);
        outputs.levels[1].obj_logits.set(0, 0, 0, f64::NAN);
        let targets = assign_targets(&[], &spec, 64, 64);
        match task_loss(&outputs, &targets) {
            Err(DetectorError::NonFiniteLoss { component, level, .. }) => {
                assert_eq!(component, "objectness");
                assert_eq!(level, 1);
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }
}
