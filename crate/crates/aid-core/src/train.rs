//! Seeded, deterministic training loops.
//!
//! Five modes share one loop: plain training (teacher or student), uniform
//! knowledge distillation (adaptive weighting with alpha forced to zero, so
//! the equivalence is exact by construction), adaptive distillation, and
//! self-distillation where a frozen copy of the same architecture plays the
//! teacher. Batches are processed image-parallel but every reduction runs in
//! index order, so a (config, data) pair always produces the same RunRecord.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aid::{build_weight_map, teacher_instance_losses, AidError, InstanceLossTable};
use crate::data::{DataError, DatasetHandle};
use crate::detector::{
    assign_targets, save_checkpoint, task_loss_with_grad, Checkpoint, CheckpointError,
    DetectorError, DetectorModel, DetectorSpec, HeadGrad, ModelGrads, TargetAssignment,
};
use crate::distill::{distill_with_grad, BaseLoss, DistillConfig, DistillError};
use crate::eval::{evaluate_model, EvalError, EvalSettings};
use crate::rng::{rng_for, stream};
use crate::tensor::{Conv2d, ConvGrad, Feat, Tensor};
use crate::types::ImageSample;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("mode requires a teacher checkpoint")]
    MissingTeacher,
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error("teacher is frozen; parameter updates are a contract violation")]
    FrozenTeacher,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Aid(#[from] AidError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Teacher,
    NoKdStudent,
    UniformKd,
    AidKd,
    SelfDistill,
}

impl TrainMode {
    pub fn needs_teacher(&self) -> bool {
        matches!(self, TrainMode::UniformKd | TrainMode::AidKd | TrainMode::SelfDistill)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Teacher => "teacher",
            TrainMode::NoKdStudent => "no_kd_student",
            TrainMode::UniformKd => "uniform_kd",
            TrainMode::AidKd => "aid_kd",
            TrainMode::SelfDistill => "self_distill",
        }
    }
}

/// Step-decay learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: 0.02, decay_epochs: vec![12, 17], decay_factor: 0.1 }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.initial * self.decay_factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub flip_prob: f64,
    pub mode: TrainMode,
    pub distill: DistillConfig,
    pub detector: DetectorSpec,
    pub eval: EvalSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 20,
            batch_size: 16,
            lr: LrSchedule::default(),
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip_norm: 10.0,
            flip_prob: 0.5,
            mode: TrainMode::Teacher,
            distill: DistillConfig::default(),
            detector: DetectorSpec::new(1.0, 3),
            eval: EvalSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr.initial.is_finite() && self.lr.initial > 0.0) {
            return Err(TrainError::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(TrainError::InvalidConfig("flip_prob must lie in [0, 1]".into()));
        }
        if !(self.grad_clip_norm.is_finite() && self.grad_clip_norm > 0.0) {
            return Err(TrainError::InvalidConfig("grad_clip_norm must be positive".into()));
        }
        self.detector.validate()?;
        self.distill.validate()?;
        Ok(())
    }

    /// The distillation config actually used by the mode: uniform KD is
    /// adaptive KD with alpha forced to zero.
    pub fn effective_distill(&self) -> DistillConfig {
        let mut d = self.distill.clone();
        if self.mode == TrainMode::UniformKd {
            d.aid.alpha = 0.0;
        }
        d
    }
}

/// Per-epoch metric record; one JSON object per line in `metrics.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub task_loss: f64,
    pub distill_loss: f64,
    pub weight_min: f64,
    pub weight_mean: f64,
    pub weight_max: f64,
    pub val_map50: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: TrainMode,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub wall_seconds: f64,
    pub final_checkpoint: Option<PathBuf>,
}

/// Outcome of a run: the record plus the trained parameters.
pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: DetectorModel,
    pub adapter: Option<Conv2d>,
}

/// A forward-only teacher. There is no mutable access to its parameters; the
/// one mutating entry point exists to surface the contract violation.
pub struct FrozenTeacher {
    model: DetectorModel,
    hash: String,
}

impl FrozenTeacher {
    pub fn new(model: DetectorModel) -> Self {
        let hash = crate::detector::hash_params(
            model.named_params().iter().map(|(n, v)| (n.as_str(), *v)),
        );
        FrozenTeacher { model, hash }
    }

    pub fn spec(&self) -> &DetectorSpec {
        self.model.spec()
    }

    pub fn model(&self) -> &DetectorModel {
        &self.model
    }

    pub fn params_hash(&self) -> &str {
        &self.hash
    }

    /// Hash over the current parameters; equal to [`Self::params_hash`] for
    /// the lifetime of the handle.
    pub fn recompute_hash(&self) -> String {
        crate::detector::hash_params(
            self.model.named_params().iter().map(|(n, v)| (n.as_str(), *v)),
        )
    }

    /// Frozen teachers reject updates.
    pub fn apply_update(&mut self, _grads: &ModelGrads) -> Result<(), TrainError> {
        Err(TrainError::FrozenTeacher)
    }
}

/// Load a checkpoint as a frozen, forward-only teacher.
pub fn freeze_teacher(checkpoint: Checkpoint) -> Result<FrozenTeacher, TrainError> {
    let (model, _) = checkpoint.into_model()?;
    Ok(FrozenTeacher::new(model))
}

enum Optimizer {
    Sgd { velocity: Vec<Vec<f64>> },
    Adam { m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64 },
}

impl Optimizer {
    fn new(kind: OptimizerKind, shapes: &[usize]) -> Self {
        let zeros = || shapes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        match kind {
            OptimizerKind::SgdMomentum => Optimizer::Sgd { velocity: zeros() },
            OptimizerKind::Adam => Optimizer::Adam { m: zeros(), v: zeros(), step: 0 },
        }
    }

    fn apply(
        &mut self,
        params: &mut [(&mut [f64], &[f64], bool)],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        clip_norm: f64,
    ) {
        let mut sq = 0.0;
        for (_, g, _) in params.iter() {
            for v in *g {
                sq += v * v;
            }
        }
        let norm = sq.sqrt();
        let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };

        match self {
            Optimizer::Sgd { velocity } => {
                for ((w, g, decay), vel) in params.iter_mut().zip(velocity) {
                    let wd = if *decay { weight_decay } else { 0.0 };
                    for i in 0..w.len() {
                        let grad = g[i] * scale + wd * w[i];
                        vel[i] = momentum * vel[i] + grad;
                        w[i] -= lr * vel[i];
                    }
                }
            }
            Optimizer::Adam { m, v, step } => {
                *step += 1;
                let t = *step as f64;
                let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                let c1 = 1.0 - b1.powf(t);
                let c2 = 1.0 - b2.powf(t);
                for ((w, g, decay), (mi, vi)) in params.iter_mut().zip(m.iter_mut().zip(v)) {
                    let wd = if *decay { weight_decay } else { 0.0 };
                    for i in 0..w.len() {
                        let grad = g[i] * scale + wd * w[i];
                        mi[i] = b1 * mi[i] + (1.0 - b1) * grad;
                        vi[i] = b2 * vi[i] + (1.0 - b2) * grad * grad;
                        let mh = mi[i] / c1;
                        let vh = vi[i] / c2;
                        w[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Losses, weight statistics and gradients of one batch.
pub struct BatchEval {
    /// Mean per-image task loss.
    pub task_loss: f64,
    /// Mean per-image weighted distillation loss (0 without a teacher).
    pub distill_loss: f64,
    /// Batch objective: `task + lambda * distill`.
    pub objective: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub weight_sum: f64,
    pub weight_count: usize,
    pub grads: ModelGrads,
    pub adapter_grad: Option<ConvGrad>,
    pub tables: Vec<(String, InstanceLossTable)>,
}

struct PerImage {
    task_total: f64,
    distill_value: f64,
    head_grads: Vec<HeadGrad>,
    d_features: Option<Vec<Tensor>>,
    adapter_grad: Option<ConvGrad>,
    table: Option<InstanceLossTable>,
}

/// Forward/backward over one batch. `distill` being `Some` selects the
/// knowledge-distillation objective against `teacher`; weight maps are
/// recomputed from the frozen teacher every batch.
pub fn batch_forward_backward(
    student: &DetectorModel,
    adapter: Option<&Conv2d>,
    teacher: Option<&FrozenTeacher>,
    samples: &[ImageSample],
    targets: &[TargetAssignment],
    distill: Option<&DistillConfig>,
    collect_tables: bool,
) -> Result<BatchEval, TrainError> {
    let b = samples.len();
    assert!(b > 0 && targets.len() == b);
    let pixels: Vec<&Tensor> = samples.iter().map(|s| &s.pixels).collect();
    let (trace, outputs) = student.forward_batch_traced(&pixels)?;
    let teacher_outputs = match (teacher, distill) {
        (Some(t), Some(_)) => Some(t.model.forward_batch(&pixels)?),
        (None, Some(_)) => return Err(TrainError::MissingTeacher),
        _ => None,
    };

    let inv_b = 1.0 / b as f64;
    let per_image: Vec<PerImage> = (0..b)
        .into_par_iter()
        .map(|i| -> Result<PerImage, TrainError> {
            let (s_feats, s_outs) = &outputs[i];
            let (task, mut head_grads) = task_loss_with_grad(s_outs, &targets[i])?;
            for hg in &mut head_grads {
                for v in hg
                    .d_cls
                    .data
                    .iter_mut()
                    .chain(hg.d_reg.data.iter_mut())
                    .chain(hg.d_obj.data.iter_mut())
                {
                    *v *= inv_b;
                }
            }
            let mut out = PerImage {
                task_total: task.total,
                distill_value: 0.0,
                head_grads,
                d_features: None,
                adapter_grad: None,
                table: None,
            };
            if let (Some(cfg), Some(t_outs)) = (distill, teacher_outputs.as_ref()) {
                let (t_feats, t_heads) = &t_outs[i];
                let table = teacher_instance_losses(t_heads, &targets[i], &cfg.aid)?;
                let weights = build_weight_map(&table, &targets[i], &cfg.aid)?;
                let grads = distill_with_grad(
                    s_feats,
                    s_outs,
                    t_feats,
                    t_heads,
                    &weights,
                    adapter,
                    cfg,
                    cfg.aid.lambda * inv_b,
                )?;
                out.distill_value = grads.value;
                if let Some(d_cls) = grads.d_cls {
                    for (hg, d) in out.head_grads.iter_mut().zip(d_cls) {
                        for (a, b) in hg.d_cls.data.iter_mut().zip(&d.data) {
                            *a += b;
                        }
                    }
                }
                if matches!(cfg.base_loss, BaseLoss::FeatureL2 | BaseLoss::AttentionGuided) {
                    out.d_features = Some(grads.d_features);
                }
                out.adapter_grad = grads.adapter;
                out.table = Some(table);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?;

    // Fixed-order reductions.
    let num_levels = student.spec().num_levels();
    let mut d_head: Vec<Feat> = Vec::with_capacity(num_levels);
    for level in 0..num_levels {
        let grads_at: Vec<HeadGrad> =
            per_image.iter().map(|p| p.head_grads[level].clone()).collect();
        d_head.push(trace.assemble_head_grad(level, &grads_at));
    }
    let d_features: Option<Vec<Feat>> = if per_image.iter().any(|p| p.d_features.is_some()) {
        Some(
            (0..num_levels)
                .map(|level| {
                    let tensors: Vec<&Tensor> = per_image
                        .iter()
                        .map(|p| &p.d_features.as_ref().expect("uniform batch")[level])
                        .collect();
                    Feat::from_image_refs(&tensors)
                })
                .collect(),
        )
    } else {
        None
    };

    let mut grads = student.zero_grads();
    student.backward(&trace, &d_head, d_features.as_deref(), &mut grads);

    let mut adapter_grad: Option<ConvGrad> = None;
    let mut task_sum = 0.0;
    let mut distill_sum = 0.0;
    let mut weight_min = f64::INFINITY;
    let mut weight_max = f64::NEG_INFINITY;
    let mut weight_sum = 0.0;
    let mut weight_count = 0usize;
    let mut tables = Vec::new();
    for (i, p) in per_image.iter().enumerate() {
        task_sum += p.task_total;
        distill_sum += p.distill_value;
        if let Some(g) = &p.adapter_grad {
            match &mut adapter_grad {
                None => adapter_grad = Some(g.clone()),
                Some(acc) => {
                    for (a, b) in acc.dw.iter_mut().zip(&g.dw) {
                        *a += b;
                    }
                    for (a, b) in acc.db.iter_mut().zip(&g.db) {
                        *a += b;
                    }
                }
            }
        }
        if let Some(table) = &p.table {
            for inst in &table.instances {
                weight_min = weight_min.min(inst.weight);
                weight_max = weight_max.max(inst.weight);
                weight_sum += inst.weight;
                weight_count += 1;
            }
            if collect_tables {
                tables.push((samples[i].image_id.clone(), table.clone()));
            }
        }
    }
    let task_loss = task_sum * inv_b;
    let distill_loss = distill_sum * inv_b;
    let lambda = distill.map(|c| c.aid.lambda).unwrap_or(0.0);
    let objective = task_loss + lambda * distill_loss;
    if !objective.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            detail: format!("objective {objective} (task {task_loss}, distill {distill_loss})"),
        });
    }
    Ok(BatchEval {
        task_loss,
        distill_loss,
        objective,
        weight_min,
        weight_max,
        weight_sum,
        weight_count,
        grads,
        adapter_grad,
        tables,
    })
}

fn padded_dims(sample: &ImageSample, max_stride: usize) -> (usize, usize) {
    (
        sample.pixels.w.div_ceil(max_stride) * max_stride,
        sample.pixels.h.div_ceil(max_stride) * max_stride,
    )
}

fn init_adapter(
    student: &DetectorSpec,
    teacher: &DetectorSpec,
    seed: u64,
) -> Option<Conv2d> {
    if student.fpn_channels == teacher.fpn_channels {
        return None;
    }
    let mut conv = Conv2d::new(student.fpn_channels, teacher.fpn_channels, 1, 1, 0);
    let mut rng = rng_for(seed, &[stream::INIT, 0xADA9]);
    let std = (1.0 / student.fpn_channels as f64).sqrt();
    for v in &mut conv.weight {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        *v = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std;
    }
    Some(conv)
}

/// Train a model according to `cfg`. When `run_dir` is given, the directory
/// receives `metrics.jsonl`, the final checkpoint (plus manifest) and, for
/// distillation modes, a `weights.jsonl` dump of the final epoch's instance
/// weights.
pub fn train(
    cfg: &TrainConfig,
    train_data: &DatasetHandle,
    val_data: &DatasetHandle,
    teacher: Option<&FrozenTeacher>,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(TrainError::InvalidConfig("empty training dataset".into()));
    }
    if cfg.detector.num_classes != train_data.num_classes() {
        return Err(TrainError::InvalidConfig(format!(
            "detector predicts {} classes, dataset has {}",
            cfg.detector.num_classes,
            train_data.num_classes()
        )));
    }
    let distill_cfg = cfg.mode.needs_teacher().then(|| cfg.effective_distill());
    let teacher = match (cfg.mode.needs_teacher(), teacher) {
        (true, Some(t)) => Some(t),
        (true, None) => return Err(TrainError::MissingTeacher),
        (false, t) => t, // ignored
    };
    let teacher_hash_before = teacher.map(|t| t.recompute_hash());
    if let Some(t) = teacher {
        if cfg.mode == TrainMode::SelfDistill && *t.spec() != cfg.detector {
            return Err(TrainError::ArchitectureMismatch(format!(
                "self-distillation requires the teacher spec to equal the student spec ({:?} vs {:?})",
                t.spec(),
                cfg.detector
            )));
        }
        if cfg.mode.needs_teacher() {
            if t.spec().fpn_strides != cfg.detector.fpn_strides
                || t.spec().num_classes != cfg.detector.num_classes
            {
                return Err(TrainError::ArchitectureMismatch(
                    "teacher and student must share fpn strides and class count".into(),
                ));
            }
        }
    }

    let mut model = DetectorModel::init(cfg.detector.clone(), cfg.seed)?;
    let mut adapter = match (&distill_cfg, teacher) {
        (Some(d), Some(t))
            if matches!(d.base_loss, BaseLoss::FeatureL2 | BaseLoss::AttentionGuided) =>
        {
            let a = init_adapter(&cfg.detector, t.spec(), cfg.seed);
            if a.is_some() && !d.adapter_enabled {
                return Err(TrainError::ArchitectureMismatch(
                    "student/teacher channel counts differ and the adapter is disabled".into(),
                ));
            }
            a
        }
        _ => None,
    };

    let samples: Vec<ImageSample> = train_data.load_all()?;
    let flipped: Vec<ImageSample> = samples.iter().map(ImageSample::flipped_horizontal).collect();

    let max_stride = cfg.detector.max_stride();
    let mut metrics_file = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut weights_file = match (run_dir, &distill_cfg) {
        (Some(dir), Some(_)) => {
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("weights.jsonl"))?))
        }
        _ => None,
    };

    let mut optimizer = {
        let shapes: Vec<usize> = {
            let grads = model.zero_grads();
            let mut v: Vec<usize> = Vec::new();
            for g in &grads.backbone {
                v.push(g.dw.len());
                v.push(g.db.len());
            }
            for g in &grads.laterals {
                v.push(g.dw.len());
                v.push(g.db.len());
            }
            v.push(grads.head.dw.len());
            v.push(grads.head.db.len());
            if let Some(a) = &adapter {
                v.push(a.weight.len());
                v.push(a.bias.len());
            }
            v
        };
        Optimizer::new(cfg.optimizer, &shapes)
    };

    let run_start = Instant::now();
    let mut epoch_records: Vec<EpochMetrics> = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let lr = cfg.lr.at(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[stream::SHUFFLE, epoch as u64]));

        let mut task_sum = 0.0;
        let mut distill_sum = 0.0;
        let mut batches = 0usize;
        let mut weight_min = f64::INFINITY;
        let mut weight_max = f64::NEG_INFINITY;
        let mut weight_sum = 0.0;
        let mut weight_count = 0usize;
        let last_epoch = epoch + 1 == cfg.epochs;

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<ImageSample> = chunk
                .iter()
                .map(|&i| {
                    let flip = rng_for(cfg.seed, &[stream::FLIP, epoch as u64, i as u64])
                        .gen_bool(cfg.flip_prob);
                    if flip { flipped[i].clone() } else { samples[i].clone() }
                })
                .collect();
            let targets: Vec<TargetAssignment> = batch
                .iter()
                .map(|s| {
                    let (pw, ph) = padded_dims(s, max_stride);
                    assign_targets(&s.instances, &cfg.detector, pw, ph)
                })
                .collect();
            let eval = batch_forward_backward(
                &model,
                adapter.as_ref(),
                teacher,
                &batch,
                &targets,
                distill_cfg.as_ref(),
                last_epoch && weights_file.is_some(),
            )
            .map_err(|e| match e {
                TrainError::NonFiniteLoss { detail, .. } =>
                    TrainError::NonFiniteLoss { epoch, batch: batch_idx, detail },
                TrainError::Detector(DetectorError::NonFiniteLoss { component, level, y, x }) => {
                    TrainError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        detail: format!("{component} loss at level {level} ({y},{x})"),
                    }
                }
                other => other,
            })?;

            task_sum += eval.task_loss;
            distill_sum += eval.distill_loss;
            batches += 1;
            if eval.weight_count > 0 {
                weight_min = weight_min.min(eval.weight_min);
                weight_max = weight_max.max(eval.weight_max);
                weight_sum += eval.weight_sum;
                weight_count += eval.weight_count;
            }
            if let Some(wf) = &mut weights_file {
                for (image_id, table) in &eval.tables {
                    let line = serde_json::json!({ "image_id": image_id, "table": table });
                    writeln!(wf, "{line}")?;
                }
            }

            let mut params = model.params_with_grads(&eval.grads);
            let mut adapter_pair;
            if let (Some(a), Some(g)) = (&mut adapter, &eval.adapter_grad) {
                adapter_pair = (a, g);
                let (a, g) = &mut adapter_pair;
                params.push((&mut a.weight, &g.dw, true));
                params.push((&mut a.bias, &g.db, false));
            }
            optimizer.apply(&mut params, lr, cfg.momentum, cfg.weight_decay, cfg.grad_clip_norm);
        }

        let val = evaluate_model(&model, val_data, &cfg.eval.decode, &cfg.eval.buckets)?;
        let (wmin, wmean, wmax) = if weight_count == 0 {
            (1.0, 1.0, 1.0)
        } else {
            (weight_min, weight_sum / weight_count as f64, weight_max)
        };
        let record = EpochMetrics {
            epoch,
            task_loss: task_sum / batches as f64,
            distill_loss: distill_sum / batches as f64,
            weight_min: wmin,
            weight_mean: wmean,
            weight_max: wmax,
            val_map50: val.map50,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        if let Some(f) = &mut metrics_file {
            writeln!(f, "{}", serde_json::to_string(&record).expect("metrics serialize"))?;
            f.flush()?;
        }
        epoch_records.push(record);
    }

    if let (Some(t), Some(before)) = (teacher, &teacher_hash_before) {
        debug_assert_eq!(&t.recompute_hash(), before, "teacher parameters must stay frozen");
    }

    let final_checkpoint = match run_dir {
        Some(dir) => {
            let path = dir.join("checkpoint.bin");
            let config_json =
                serde_json::to_value(cfg).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
            save_checkpoint(&path, &model, adapter.as_ref(), &config_json, cfg.seed, cfg.epochs)?;
            Some(path)
        }
        None => None,
    };

    Ok(TrainOutcome {
        record: RunRecord {
            mode: cfg.mode,
            seed: cfg.seed,
            epochs: epoch_records,
            wall_seconds: run_start.elapsed().as_secs_f64(),
            final_checkpoint,
        },
        model,
        adapter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Split, SyntheticSpec};

    fn tiny_dataset(seed: u64, n: usize) -> DatasetHandle {
        generate_synthetic(&SyntheticSpec {
            seed,
            num_images: n,
            image_size: 32,
            ..SyntheticSpec::default()
        })
    }

    fn tiny_config(mode: TrainMode, width: f64) -> TrainConfig {
        TrainConfig {
            seed: 5,
            epochs: 2,
            batch_size: 4,
            lr: LrSchedule { initial: 0.01, decay_epochs: vec![], decay_factor: 0.1 },
            mode,
            detector: DetectorSpec {
                width_multiplier: width,
                num_classes: 3,
                fpn_strides: vec![8, 16],
                fpn_channels: DetectorSpec::default_fpn_channels(width),
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_steps_down() {
        let lr = LrSchedule { initial: 0.1, decay_epochs: vec![2, 4], decay_factor: 0.1 };
        assert_eq!(lr.at(0), 0.1);
        assert_eq!(lr.at(1), 0.1);
        assert!((lr.at(2) - 0.01).abs() < 1e-12);
        assert!((lr.at(4) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_dataset(1, 8);
        let val = tiny_dataset(2, 4).with_split(Split::Val);
        let cfg = tiny_config(TrainMode::Teacher, 0.5);
        let a = train(&cfg, &data, &val, None, None).unwrap();
        let b = train(&cfg, &data, &val, None, None).unwrap();
        for (x, y) in a.record.epochs.iter().zip(&b.record.epochs) {
            assert_eq!(x.task_loss, y.task_loss);
            assert_eq!(x.val_map50, y.val_map50);
        }
        for ((_, p), (_, q)) in a.model.named_params().iter().zip(b.model.named_params().iter()) {
            assert_eq!(p, q);
        }
    }

    #[test]
    fn missing_teacher_is_rejected() {
        let data = tiny_dataset(1, 4);
        let val = tiny_dataset(2, 2).with_split(Split::Val);
        let cfg = tiny_config(TrainMode::AidKd, 0.5);
        assert!(matches!(train(&cfg, &data, &val, None, None), Err(TrainError::MissingTeacher)));
    }

    #[test]
    fn frozen_teacher_rejects_updates_and_keeps_hash() {
        let model = DetectorModel::init(DetectorSpec::new(0.5, 3), 9).unwrap();
        let grads = model.zero_grads();
        let mut frozen = FrozenTeacher::new(model);
        let before = frozen.params_hash().to_string();
        assert!(matches!(frozen.apply_update(&grads), Err(TrainError::FrozenTeacher)));
        assert_eq!(frozen.recompute_hash(), before);
        // forward twice, identical outputs
        let img = Tensor::zeros(3, 32, 32);
        let a = frozen.model().forward(&img).unwrap();
        let b = frozen.model().forward(&img).unwrap();
        assert_eq!(a.1.levels[0].cls_logits.data, b.1.levels[0].cls_logits.data);
    }

    #[test]
    fn self_distill_requires_matching_spec() {
        let data = tiny_dataset(1, 4);
        let val = tiny_dataset(2, 2).with_split(Split::Val);
        let teacher_model = DetectorModel::init(DetectorSpec::new(1.0, 3), 0).unwrap();
        let frozen = FrozenTeacher::new(teacher_model);
        let cfg = tiny_config(TrainMode::SelfDistill, 0.5);
        assert!(matches!(
            train(&cfg, &data, &val, Some(&frozen), None),
            Err(TrainError::ArchitectureMismatch(_))
        ));
    }

    #[test]
    fn loss_decreases_on_tiny_run() {
        let data = tiny_dataset(3, 16);
        let val = tiny_dataset(4, 4).with_split(Split::Val);
        let mut cfg = tiny_config(TrainMode::Teacher, 0.5);
        cfg.epochs = 4;
        let out = train(&cfg, &data, &val, None, None).unwrap();
        let first = out.record.epochs.first().unwrap().task_loss;
        let last = out.record.epochs.last().unwrap().task_loss;
        assert!(last < first, "task loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn uniform_kd_weights_are_exactly_one() {
        let data = tiny_dataset(5, 8);
        let val = tiny_dataset(6, 2).with_split(Split::Val);
        let mut tcfg = tiny_config(TrainMode::Teacher, 1.0);
        tcfg.epochs = 1;
        let teacher = train(&tcfg, &data, &val, None, None).unwrap();
        let frozen = FrozenTeacher::new(teacher.model);
        let cfg = tiny_config(TrainMode::UniformKd, 0.5);
        let out = train(&cfg, &data, &val, Some(&frozen), None).unwrap();
        for e in &out.record.epochs {
            assert_eq!(e.weight_min, 1.0);
            assert_eq!(e.weight_mean, 1.0);
            assert_eq!(e.weight_max, 1.0);
            assert!(e.distill_loss > 0.0);
        }
        // teacher untouched by the run
        assert_eq!(frozen.recompute_hash(), frozen.params_hash());
    }
}
