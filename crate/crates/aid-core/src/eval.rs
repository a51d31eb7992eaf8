//! Detection-quality metrics and model-complexity statistics.
//!
//! AP uses all-point interpolation (area under the precision envelope) with
//! true positives at IoU >= 0.5 by default; mAP averages per-class APs over
//! classes that have at least one ground truth. Scale buckets follow the
//! small/medium/large convention with configurable area thresholds so toy
//! image sizes can scale them down.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DatasetHandle;
use crate::detector::{
    decode, load_checkpoint, Checkpoint, CheckpointError, DecodeParams, DetectorError,
    DetectorModel, DetectorSpec,
};
use crate::types::{box_area, box_iou, Detection, Instance};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty model")]
    EmptyModel,
    #[error("class count mismatch: model predicts {model}, dataset has {dataset}")]
    ClassCountMismatch { model: usize, dataset: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("data error: {0}")]
    Data(#[from] crate::data::DataError),
}

/// Area thresholds for the small/medium/large ground-truth buckets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleBuckets {
    pub small_max_area: f64,
    pub medium_max_area: f64,
}

impl Default for ScaleBuckets {
    fn default() -> Self {
        // The COCO convention: 32^2 and 96^2.
        ScaleBuckets { small_max_area: 1024.0, medium_max_area: 9216.0 }
    }
}

impl ScaleBuckets {
    /// Thresholds scaled for a toy image side relative to a reference side.
    pub fn scaled_for(image_size: usize, reference_size: usize) -> Self {
        let s = image_size as f64 / reference_size as f64;
        let d = Self::default();
        ScaleBuckets {
            small_max_area: d.small_max_area * s * s,
            medium_max_area: d.medium_max_area * s * s,
        }
    }

    fn bucket(&self, area: f64) -> usize {
        if area < self.small_max_area {
            0
        } else if area < self.medium_max_area {
            1
        } else {
            2
        }
    }
}

/// Decode parameters and scale buckets used for validation during training
/// and by the CLI evaluator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub decode: DecodeParams,
    pub buckets: ScaleBuckets,
}

/// Per-class APs, their mean, per-scale APs and raw counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class: BTreeMap<String, f64>,
    pub map50: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub num_gt: usize,
    pub num_det: usize,
}

/// Greedy score-order matching: each detection takes the highest-IoU unmatched
/// ground truth of its class at IoU >= `iou_threshold`; each ground truth
/// matches at most once. Returns, per input detection, the index of the
/// matched ground truth (true positive) or `None` (false positive).
pub fn match_detections(
    detections: &[Detection],
    ground_truths: &[Instance],
    iou_threshold: f64,
) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; ground_truths.len()];
    let mut labels = vec![None; detections.len()];
    for &di in &order {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in ground_truths.iter().enumerate() {
            if taken[gi] || gt.class_id != det.class_id {
                continue;
            }
            let iou = box_iou(&det.bbox, &gt.bbox);
            if iou < iou_threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, cur)) => iou > cur,
            };
            if better {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            labels[di] = Some(gi);
        }
    }
    labels
}

/// All-point average precision from (score, is-true-positive) pairs.
/// Returns `None` when there are no ground truths (AP undefined).
pub fn average_precision(detections: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].0.total_cmp(&detections[a].0).then(a.cmp(&b)));
    // precision/recall points along the score-descending sweep
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(order.len()); // (recall, precision)
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &i in &order {
        if detections[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    // precision envelope: running max from the right
    let mut envelope = points.clone();
    let mut running = 0.0f64;
    for p in envelope.iter_mut().rev() {
        running = running.max(p.1);
        p.1 = running;
    }
    // AP = sum over recall steps of delta-recall * envelope precision
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in envelope {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Per-image detections paired with that image's ground truths.
pub struct ImageDetections<'a> {
    pub detections: Vec<Detection>,
    pub ground_truths: &'a [Instance],
}

/// Metrics over a full dataset given per-image detections.
pub fn evaluate_detections(
    images: &[ImageDetections<'_>],
    class_names: &[String],
    iou_threshold: f64,
    buckets: &ScaleBuckets,
) -> EvalResult {
    let num_classes = class_names.len();
    // Flatten (per class): detection scores with match info and gt areas.
    struct Flat {
        score: f64,
        matched_bucket: Option<usize>, // bucket of the matched gt
    }
    let mut per_class_dets: Vec<Vec<Flat>> = (0..num_classes).map(|_| Vec::new()).collect();
    let mut gt_count = vec![0usize; num_classes];
    let mut gt_bucket_count = vec![[0usize; 3]; num_classes];
    let mut num_det = 0;
    let mut num_gt = 0;

    for img in images {
        num_det += img.detections.len();
        num_gt += img.ground_truths.len();
        for gt in img.ground_truths {
            let c = gt.class_id as usize;
            gt_count[c] += 1;
            gt_bucket_count[c][buckets.bucket(box_area(&gt.bbox))] += 1;
        }
        let labels = match_detections(&img.detections, img.ground_truths, iou_threshold);
        for (det, label) in img.detections.iter().zip(labels) {
            per_class_dets[det.class_id as usize].push(Flat {
                score: det.score,
                matched_bucket: label
                    .map(|gi| buckets.bucket(box_area(&img.ground_truths[gi].bbox))),
            });
        }
    }

    let mut per_class = BTreeMap::new();
    let mut ap_sum = 0.0;
    let mut ap_n = 0usize;
    for c in 0..num_classes {
        let pairs: Vec<(f64, bool)> =
            per_class_dets[c].iter().map(|f| (f.score, f.matched_bucket.is_some())).collect();
        if let Some(ap) = average_precision(&pairs, gt_count[c]) {
            per_class.insert(class_names[c].clone(), ap);
            ap_sum += ap;
            ap_n += 1;
        }
    }
    let map50 = if ap_n == 0 { 0.0 } else { ap_sum / ap_n as f64 };

    // Scale-bucket APs: only ground truths in the bucket count; detections
    // matched to out-of-bucket ground truths are ignored, unmatched ones stay
    // false positives everywhere.
    let mut bucket_ap = [None, None, None];
    for (b, slot) in bucket_ap.iter_mut().enumerate() {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in 0..num_classes {
            let pairs: Vec<(f64, bool)> = per_class_dets[c]
                .iter()
                .filter(|f| match f.matched_bucket {
                    None => true,               // unmatched: false positive
                    Some(g) => g == b,          // matched in-bucket: true positive
                })
                .map(|f| (f.score, f.matched_bucket == Some(b)))
                .collect();
            if let Some(ap) = average_precision(&pairs, gt_bucket_count[c][b]) {
                sum += ap;
                n += 1;
            }
        }
        *slot = if n == 0 { None } else { Some(sum / n as f64) };
    }

    EvalResult {
        per_class,
        map50,
        ap_small: bucket_ap[0],
        ap_medium: bucket_ap[1],
        ap_large: bucket_ap[2],
        num_gt,
        num_det,
    }
}

/// Run a model over a dataset and score it. Deterministic given (model,
/// dataset); image order does not matter because AP sorts by score with
/// stable tie-breaks.
pub fn evaluate_model(
    model: &DetectorModel,
    dataset: &DatasetHandle,
    params: &DecodeParams,
    buckets: &ScaleBuckets,
) -> Result<EvalResult, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if model.spec().num_classes != dataset.num_classes() {
        return Err(EvalError::ClassCountMismatch {
            model: model.spec().num_classes,
            dataset: dataset.num_classes(),
        });
    }
    let samples = dataset.load_all()?;
    let mut all: Vec<(Vec<Detection>, &[Instance])> = Vec::with_capacity(samples.len());
    for (sample, rec) in samples.iter().zip(&dataset.samples) {
        let (_, outputs) = model.forward(&sample.pixels)?;
        let dets =
            decode(&outputs, params, sample.pixels.w as f64, sample.pixels.h as f64);
        all.push((dets, &rec.instances));
    }
    let images: Vec<ImageDetections<'_>> = all
        .into_iter()
        .map(|(detections, ground_truths)| ImageDetections { detections, ground_truths })
        .collect();
    Ok(evaluate_detections(&images, &dataset.class_names, 0.5, buckets))
}

/// Evaluate a stored checkpoint against a dataset.
pub fn evaluate(
    checkpoint_path: &Path,
    dataset: &DatasetHandle,
    params: &DecodeParams,
    buckets: &ScaleBuckets,
) -> Result<EvalResult, EvalError> {
    let (model, _) = load_checkpoint(checkpoint_path)?.into_model()?;
    evaluate_model(&model, dataset, params, buckets)
}

/// Parameter count and analytic FLOPs at a stated input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub parameter_count: usize,
    /// Convolution multiply-accumulates times two, summed over the forward
    /// pass at `input_resolution`.
    pub flops_per_forward: u64,
    pub input_resolution: usize,
}

impl ModelStats {
    pub fn gflops(&self) -> f64 {
        self.flops_per_forward as f64 / 1e9
    }
}

/// FLOPs of one convolution: `2 * c_in * c_out * k^2 * h_out * w_out`.
pub fn conv_flops(c_in: usize, c_out: usize, k: usize, h_out: usize, w_out: usize) -> u64 {
    2 * (c_in * c_out * k * k * h_out * w_out) as u64
}

fn spec_flops(spec: &DetectorSpec, resolution: usize) -> u64 {
    let mut flops = 0u64;
    let mut c_prev = 3;
    let mut side = resolution;
    let num_stages = spec.max_stride().trailing_zeros() as usize;
    for stage in 0..num_stages {
        let stride = 1usize << (stage + 1);
        let c_out = spec.backbone_channels(stride);
        side = side.div_ceil(2);
        flops += conv_flops(c_prev, c_out, 3, side, side);
        c_prev = c_out;
    }
    for (li, &stride) in spec.fpn_strides.iter().enumerate() {
        let c_in = spec.backbone_channels(stride);
        let (h, w) = spec.level_dims(li, resolution, resolution);
        flops += conv_flops(c_in, spec.fpn_channels, 1, h, w);
        flops += conv_flops(spec.fpn_channels, spec.num_classes + 5, 3, h, w);
    }
    flops
}

/// Stats straight from a model.
pub fn model_stats_of(model: &DetectorModel, resolution: usize) -> Result<ModelStats, EvalError> {
    let parameter_count = model.param_count();
    if parameter_count == 0 {
        return Err(EvalError::EmptyModel);
    }
    Ok(ModelStats {
        parameter_count,
        flops_per_forward: spec_flops(model.spec(), resolution),
        input_resolution: resolution,
    })
}

/// Stats from a stored checkpoint, counting every stored array (adapter
/// included) but walking only the inference graph for FLOPs.
pub fn model_stats(checkpoint: &Checkpoint, resolution: usize) -> Result<ModelStats, EvalError> {
    let parameter_count = checkpoint.param_count();
    if parameter_count == 0 {
        return Err(EvalError::EmptyModel);
    }
    Ok(ModelStats {
        parameter_count,
        flops_per_forward: spec_flops(&checkpoint.spec, resolution),
        input_resolution: resolution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BoundingBox;

    fn det(class_id: u32, x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Detection {
        Detection { class_id, bbox: BoundingBox::new(x1, y1, x2, y2).unwrap(), score }
    }

    fn gt(id: u32, class_id: u32, x1: f64, y1: f64, x2: f64, y2: f64) -> Instance {
        Instance { instance_id: id, class_id, bbox: BoundingBox::new(x1, y1, x2, y2).unwrap() }
    }

    #[test]
    fn exact_detection_is_true_positive() {
        let labels = match_detections(
            &[det(0, 0.0, 0.0, 10.0, 10.0, 0.9)],
            &[gt(0, 0, 0.0, 0.0, 10.0, 10.0)],
            0.5,
        );
        assert_eq!(labels, vec![Some(0)]);
    }

    #[test]
    fn second_detection_on_same_gt_is_false_positive() {
        let labels = match_detections(
            &[det(0, 0.0, 0.0, 10.0, 10.0, 0.9), det(0, 0.5, 0.5, 10.0, 10.0, 0.8)],
            &[gt(0, 0, 0.0, 0.0, 10.0, 10.0)],
            0.5,
        );
        assert_eq!(labels[0], Some(0));
        assert_eq!(labels[1], None);
    }

    // Exhaustive oracle: replay greedy matching with a from-scratch
    // implementation that walks score order and scans the full IoU matrix.
    fn match_oracle(dets: &[Detection], gts: &[Instance], thr: f64) -> Vec<Option<usize>> {
        let mut idx: Vec<usize> = (0..dets.len()).collect();
        idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
        let mut used = vec![false; gts.len()];
        let mut out = vec![None; dets.len()];
        for &i in &idx {
            let mut best_iou = thr;
            let mut best = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.class_id != dets[i].class_id {
                    continue;
                }
                let iou = box_iou(&dets[i].bbox, &g.bbox);
                if iou >= best_iou && (best.is_none() || iou > best_iou) {
                    best_iou = iou;
                    best = Some(j);
                }
            }
            if let Some(j) = best {
                used[j] = true;
                out[i] = Some(j);
            }
        }
        out
    }

    #[test]
    fn matching_agrees_with_exhaustive_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(31, &[5]);
        for _ in 0..200 {
            let nd = rng.gen_range(0..=6usize);
            let ng = rng.gen_range(0..=4usize);
            let dets: Vec<Detection> = (0..nd)
                .map(|_| {
                    let x1 = rng.gen_range(0.0..20.0);
                    let y1 = rng.gen_range(0.0..20.0);
                    det(
                        rng.gen_range(0..2),
                        x1,
                        y1,
                        x1 + rng.gen_range(2.0..10.0),
                        y1 + rng.gen_range(2.0..10.0),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect();
            let gts: Vec<Instance> = (0..ng)
                .map(|i| {
                    let x1 = rng.gen_range(0.0..20.0);
                    let y1 = rng.gen_range(0.0..20.0);
                    gt(
                        i as u32,
                        rng.gen_range(0..2),
                        x1,
                        y1,
                        x1 + rng.gen_range(2.0..10.0),
                        y1 + rng.gen_range(2.0..10.0),
                    )
                })
                .collect();
            assert_eq!(match_detections(&dets, &gts, 0.5), match_oracle(&dets, &gts, 0.5));
        }
    }

    #[test]
    fn ap_trivial_cases() {
        // all detections true positives covering all gts
        let ap = average_precision(&[(0.9, true), (0.8, true)], 2).unwrap();
        assert_eq!(ap, 1.0);
        // zero true positives
        let ap = average_precision(&[(0.9, false), (0.8, false)], 3).unwrap();
        assert_eq!(ap, 0.0);
        // no ground truth: undefined
        assert!(average_precision(&[(0.9, true)], 0).is_none());
        // no detections but gts exist: zero recall
        assert_eq!(average_precision(&[], 2).unwrap(), 0.0);
    }

    #[test]
    fn ap_hand_walked_case() {
        // labels [TP, FP, TP] at scores [0.9, 0.8, 0.7], 2 gts:
        // precision points (1, 1/2, 2/3), envelope -> AP = 0.5*1 + 0.5*(2/3)
        let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-9);
    }

    // Brute force: AP as the exact area under the envelope computed from
    // every distinct threshold.
    fn ap_bruteforce(dets: &[(f64, bool)], num_gt: usize) -> Option<f64> {
        if num_gt == 0 {
            return None;
        }
        let mut thresholds: Vec<f64> = dets.iter().map(|d| d.0).collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        // all (recall, precision) points from sweeping thresholds downward
        let mut pr: Vec<(f64, f64)> = Vec::new();
        for &t in thresholds.iter().rev() {
            let kept: Vec<_> = dets.iter().filter(|d| d.0 >= t).collect();
            let tp = kept.iter().filter(|d| d.1).count();
            if kept.is_empty() {
                continue;
            }
            pr.push((tp as f64 / num_gt as f64, tp as f64 / kept.len() as f64));
        }
        pr.sort_by(|a, b| a.0.total_cmp(&b.0));
        let envelope_at = |r: f64| -> f64 {
            pr.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0f64, f64::max)
        };
        let mut recalls: Vec<f64> = pr.iter().map(|p| p.0).collect();
        recalls.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in recalls {
            ap += (r - prev) * envelope_at(r);
            prev = r;
        }
        Some(ap)
    }

    #[test]
    fn ap_matches_bruteforce_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(32, &[5]);
        for _ in 0..200 {
            let n = rng.gen_range(0..=10usize);
            let dets: Vec<(f64, bool)> =
                (0..n).map(|_| (rng.gen_range(0.0..1.0), rng.gen_bool(0.5))).collect();
            let tp_count = dets.iter().filter(|d| d.1).count();
            let num_gt = tp_count + rng.gen_range(0..=4usize);
            let got = average_precision(&dets, num_gt);
            let want = ap_bruteforce(&dets, num_gt);
            match (got, want) {
                (None, None) => {}
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "{a} vs {b}"),
                other => panic!("mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn ap_invariant_to_monotone_score_transforms() {
        let dets = vec![(0.9, true), (0.6, false), (0.5, true), (0.2, false)];
        let transformed: Vec<(f64, bool)> =
            dets.iter().map(|&(s, t)| (0.5 * s * s * s + 0.1, t)).collect();
        assert_eq!(average_precision(&dets, 3), average_precision(&transformed, 3));
    }

    #[test]
    fn perfect_oracle_detections_score_one() {
        use crate::data::{generate_synthetic, SyntheticSpec};
        let handle = generate_synthetic(&SyntheticSpec { num_images: 10, ..Default::default() });
        let images: Vec<ImageDetections<'_>> = handle
            .samples
            .iter()
            .map(|s| ImageDetections {
                detections: s
                    .instances
                    .iter()
                    .map(|g| Detection { class_id: g.class_id, bbox: g.bbox, score: 0.99 })
                    .collect(),
                ground_truths: &s.instances,
            })
            .collect();
        let result =
            evaluate_detections(&images, &handle.class_names, 0.5, &ScaleBuckets::default());
        assert!((result.map50 - 1.0).abs() < 1e-12);
        assert_eq!(result.num_gt, result.num_det);
    }

    #[test]
    fn duplication_invariance() {
        // duplicating every image (dets + gts) leaves mAP unchanged, counts doubled
        let dets1 = vec![det(0, 0.0, 0.0, 4.0, 4.0, 0.8), det(0, 10.0, 10.0, 14.0, 14.0, 0.6)];
        let gts1 = vec![gt(0, 0, 0.0, 0.0, 4.0, 4.0), gt(1, 0, 20.0, 20.0, 24.0, 24.0)];
        let names = vec!["a".to_string()];
        let single = [ImageDetections { detections: dets1.clone(), ground_truths: &gts1 }];
        let double = [
            ImageDetections { detections: dets1.clone(), ground_truths: &gts1 },
            ImageDetections { detections: dets1.clone(), ground_truths: &gts1 },
        ];
        let a = evaluate_detections(&single, &names, 0.5, &ScaleBuckets::default());
        let b = evaluate_detections(&double, &names, 0.5, &ScaleBuckets::default());
        assert!((a.map50 - b.map50).abs() < 1e-12);
        assert_eq!(b.num_gt, 2 * a.num_gt);
        assert_eq!(b.num_det, 2 * a.num_det);
    }

    #[test]
    fn evaluate_model_rejects_empty_and_mismatched() {
        use crate::data::{generate_synthetic, DatasetHandle, Split, SyntheticSpec};
        let model = DetectorModel::init(DetectorSpec::new(0.25, 3), 0).unwrap();
        let empty = DatasetHandle::new(vec![], vec!["circle".into()], Split::Val).unwrap();
        assert!(matches!(
            evaluate_model(&model, &empty, &DecodeParams::default(), &ScaleBuckets::default()),
            Err(EvalError::EmptyDataset)
        ));
        let handle = generate_synthetic(&SyntheticSpec { num_images: 2, ..Default::default() });
        let wrong = DetectorModel::init(DetectorSpec::new(0.25, 5), 0).unwrap();
        assert!(matches!(
            evaluate_model(&wrong, &handle, &DecodeParams::default(), &ScaleBuckets::default()),
            Err(EvalError::ClassCountMismatch { .. })
        ));
    }

    #[test]
    fn conv_flops_hand_count() {
        // 3 -> 8 channel 3x3 conv with 32x32 output
        assert_eq!(conv_flops(3, 8, 3, 32, 32), 442_368);
        let conv = crate::tensor::Conv2d::new(3, 8, 3, 1, 1);
        assert_eq!(conv.num_params(), 3 * 8 * 9 + 8);
    }

    #[test]
    fn student_params_below_teacher() {
        let teacher = DetectorModel::init(DetectorSpec::new(2.0, 3), 0).unwrap();
        let student = DetectorModel::init(DetectorSpec::new(1.0, 3), 0).unwrap();
        let ts = model_stats_of(&teacher, 64).unwrap();
        let ss = model_stats_of(&student, 64).unwrap();
        assert!(ss.parameter_count < ts.parameter_count);
        assert!(ss.flops_per_forward < ts.flops_per_forward);
    }
}
