//! Adaptive instance distillation for object detection.
//!
//! A desk-scale single-stage FPN detector plus a knowledge-distillation
//! harness in which the distillation loss of each ground-truth instance is
//! down-weighted by `exp(-alpha * teacher_task_loss)`, per instance and per
//! FPN scale. Includes teacher/student training loops, self-distillation,
//! detection-quality evaluation, and a deterministic synthetic dataset
//! generator with KITTI/COCO ingestion.

pub mod aid;
pub mod data;
pub mod detector;
pub mod distill;
pub mod eval;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod types;
