//! Box decoding and non-maximum suppression.

use super::HeadOutputs;
use crate::tensor::math::sigmoid;
use crate::types::{box_iou, BoundingBox, Detection};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeParams {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { score_threshold: 0.05, nms_iou: 0.5, max_detections: 100 }
    }
}

/// Decode head outputs into scored detections: per-location score is
/// `sigmoid(cls) * sigmoid(objectness)`, boxes come from the distance
/// regression, then class-wise greedy NMS and a global score-sorted cap.
pub fn decode(
    outputs: &HeadOutputs,
    params: &DecodeParams,
    image_width: f64,
    image_height: f64,
) -> Vec<Detection> {
    let mut candidates: Vec<Detection> = Vec::new();
    for level in &outputs.levels {
        let s = level.stride as f64;
        let (h, w) = (level.cls_logits.h, level.cls_logits.w);
        for y in 0..h {
            for x in 0..w {
                let obj = sigmoid(level.obj_logits.get(0, y, x));
                let cx = (x as f64 + 0.5) * s;
                let cy = (y as f64 + 0.5) * s;
                for c in 0..level.cls_logits.c {
                    let score = sigmoid(level.cls_logits.get(c, y, x)) * obj;
                    if score < params.score_threshold {
                        continue;
                    }
                    let l = level.box_distances.get(0, y, x) * s;
                    let t = level.box_distances.get(1, y, x) * s;
                    let r = level.box_distances.get(2, y, x) * s;
                    let b = level.box_distances.get(3, y, x) * s;
                    let bbox = match BoundingBox::new(
                        (cx - l).clamp(0.0, image_width),
                        (cy - t).clamp(0.0, image_height),
                        (cx + r).clamp(0.0, image_width),
                        (cy + b).clamp(0.0, image_height),
                    ) {
                        Ok(b) => b,
                        Err(_) => continue, // degenerate after clamping
                    };
                    candidates.push(Detection { class_id: c as u32, bbox, score });
                }
            }
        }
    }
    let mut kept = nms(&candidates, params.nms_iou);
    kept.truncate(params.max_detections);
    kept
}

/// Greedy score-descending NMS, applied independently per class. Ties are
/// broken by input order (lower index wins), which keeps the result stable.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let det = &detections[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == det.class_id && box_iou(&k.bbox, &det.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(*det);
        }
    }
    kept
}
