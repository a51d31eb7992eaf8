//! Subcommand implementations. Contract violations (bad usage, missing or
//! mismatched inputs, unwritable output) exit with code 2; internal failures
//! exit with 1.

use std::path::{Path, PathBuf};

use aid_core::data::{generate_synthetic, load_dataset, save_dataset, DatasetHandle, Split};
use aid_core::detector::{decode, load_checkpoint};
use aid_core::eval::{evaluate_model, model_stats, EvalResult};
use aid_core::train::{freeze_teacher, train, RunRecord, TrainError, TrainMode};
use anyhow::{anyhow, Context};

use crate::config::{echo_config, AppConfig};
use crate::{plot, render};

pub enum CmdError {
    /// Usage or contract error: exit code 2.
    Contract(anyhow::Error),
    /// Internal error: exit code 1.
    Internal(anyhow::Error),
}

pub fn contract(e: impl Into<anyhow::Error>) -> CmdError {
    CmdError::Contract(e.into())
}

pub fn internal(e: impl Into<anyhow::Error>) -> CmdError {
    CmdError::Internal(e.into())
}

fn classify_train(e: TrainError) -> CmdError {
    match e {
        TrainError::MissingTeacher
        | TrainError::ArchitectureMismatch(_)
        | TrainError::InvalidConfig(_)
        | TrainError::Checkpoint(_)
        | TrainError::Data(_) => contract(e),
        other => internal(other),
    }
}

/// `gen-data`: write the synthetic train and val splits.
pub fn gen_data(cfg: &AppConfig, out: &Path) -> Result<(), CmdError> {
    let (train_spec, val_spec) = cfg.synthetic_splits();
    let train = generate_synthetic(&train_spec);
    let val = generate_synthetic(&val_spec).with_split(Split::Val);
    for (split, handle) in [("train", &train), ("val", &val)] {
        let dir = out.join(split);
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(contract)?;
        save_dataset(handle, &dir).map_err(contract)?;
        let instances: usize = handle.samples.iter().map(|s| s.instances.len()).sum();
        println!(
            "wrote {} split: {} images, {} instances -> {}",
            split,
            handle.len(),
            instances,
            dir.display()
        );
    }
    Ok(())
}

fn load_split(dir: &Path, split: Split) -> Result<DatasetHandle, CmdError> {
    let name = match split {
        Split::Train => "train",
        Split::Val => "val",
    };
    let path = dir.join(name);
    load_dataset(&path)
        .map(|h| h.with_split(split))
        .map_err(|e| contract(anyhow!("loading {} split from {}: {e}", name, path.display())))
}

/// `train`: run one training mode into a run directory.
pub fn cmd_train(
    cfg: &AppConfig,
    mode: TrainMode,
    out: &Path,
    teacher_path: Option<&Path>,
) -> Result<(), CmdError> {
    let train_cfg = cfg.to_train_config(mode);
    train_cfg.validate().map_err(classify_train)?;

    let teacher = match (mode.needs_teacher(), teacher_path) {
        (true, None) => return Err(classify_train(TrainError::MissingTeacher)),
        (_, Some(path)) => {
            let ck = load_checkpoint(path)
                .with_context(|| format!("loading teacher {}", path.display()))
                .map_err(contract)?;
            Some(freeze_teacher(ck).map_err(classify_train)?)
        }
        (false, None) => None,
    };

    let dataset_dir = cfg
        .data
        .dataset_dir
        .as_ref()
        .ok_or_else(|| contract(anyhow!("data.dataset_dir is not set (generate data first)")))?;
    let train_data = load_split(dataset_dir, Split::Train)?;
    let val_data = load_split(dataset_dir, Split::Val)?;

    // Config is fully validated; now side effects may start.
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating run dir {}", out.display()))
        .map_err(contract)?;
    let mut echoed = cfg.clone();
    echoed.train.mode = mode;
    std::fs::write(out.join("config.toml"), echo_config(&echoed).map_err(internal)?)
        .map_err(|e| contract(anyhow!("writing config echo: {e}")))?;

    let outcome =
        train(&train_cfg, &train_data, &val_data, teacher.as_ref(), Some(out)).map_err(classify_train)?;

    if let Some(t) = &teacher {
        // Frozen-teacher contract: bit-identical parameters after the run.
        if t.recompute_hash() != t.params_hash() {
            return Err(internal(anyhow!("teacher parameters changed during distillation")));
        }
    }

    let result =
        evaluate_model(&outcome.model, &val_data, &train_cfg.eval.decode, &train_cfg.eval.buckets)
            .map_err(|e| internal(anyhow!("final evaluation: {e}")))?;
    write_eval_json(&out.join("eval.json"), &result)?;
    let summary = serde_json::to_string_pretty(&outcome.record).map_err(|e| internal(anyhow!(e)))?;
    std::fs::write(out.join("summary.json"), summary + "\n").map_err(|e| internal(anyhow!(e)))?;

    let last = outcome.record.epochs.last().expect("at least one epoch");
    println!(
        "mode={} seed={} epochs={} task_loss={:.4} distill_loss={:.4} val_map50={:.4}",
        mode.as_str(),
        train_cfg.seed,
        outcome.record.epochs.len(),
        last.task_loss,
        last.distill_loss,
        last.val_map50,
    );
    println!("run dir: {}", out.display());
    Ok(())
}

fn write_eval_json(path: &Path, result: &EvalResult) -> Result<(), CmdError> {
    let json = serde_json::to_string_pretty(result).map_err(|e| internal(anyhow!(e)))?;
    std::fs::write(path, json + "\n").map_err(|e| contract(anyhow!("writing {}: {e}", path.display())))
}

fn print_eval_table(result: &EvalResult) {
    println!("{:<14} {:>8}", "class", "AP@0.5");
    for (name, ap) in &result.per_class {
        println!("{name:<14} {ap:>8.4}");
    }
    println!("{:<14} {:>8.4}", "mAP@0.5", result.map50);
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "scale AP: small {} / medium {} / large {}",
        fmt(result.ap_small),
        fmt(result.ap_medium),
        fmt(result.ap_large)
    );
    println!("ground truths: {}, detections: {}", result.num_gt, result.num_det);
}

/// `eval`: score a checkpoint against the val split of a dataset directory.
pub fn cmd_eval(
    cfg: &AppConfig,
    checkpoint: &Path,
    data_dir: &Path,
    out_file: &Path,
) -> Result<(), CmdError> {
    if !checkpoint.exists() {
        return Err(contract(anyhow!("checkpoint {} does not exist", checkpoint.display())));
    }
    let dataset = load_dataset(data_dir)
        .map_err(|e| contract(anyhow!("loading dataset {}: {e}", data_dir.display())))?;
    let (model, _) = load_checkpoint(checkpoint)
        .and_then(|c| c.into_model())
        .map_err(|e| contract(anyhow!("loading checkpoint: {e}")))?;
    let result = evaluate_model(&model, &dataset, &cfg.eval.decode, &cfg.eval.buckets)
        .map_err(|e| contract(anyhow!("{e}")))?;
    if let Some(parent) = out_file.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| contract(anyhow!("{e}")))?;
        }
    }
    write_eval_json(out_file, &result)?;
    print_eval_table(&result);
    Ok(())
}

struct RunInfo {
    dir: PathBuf,
    mode: String,
    seed: u64,
    image_size: usize,
    metrics: Vec<aid_core::train::EpochMetrics>,
    eval: EvalResult,
    weights: Vec<f64>,
}

fn read_run(dir: &Path) -> Result<RunInfo, CmdError> {
    let metrics_path = dir.join("metrics.jsonl");
    if !metrics_path.exists() {
        return Err(contract(anyhow!("run {} is missing metrics.jsonl", dir.display())));
    }
    let metrics: Vec<aid_core::train::EpochMetrics> = std::fs::read_to_string(&metrics_path)
        .map_err(|e| contract(anyhow!("{e}")))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(|e| contract(anyhow!("run {}: bad metrics.jsonl: {e}", dir.display())))?;

    let run_cfg: AppConfig =
        toml::from_str(&std::fs::read_to_string(dir.join("config.toml")).map_err(|e| {
            contract(anyhow!("run {} is missing config.toml: {e}", dir.display()))
        })?)
        .map_err(|e| contract(anyhow!("run {}: bad config.toml: {e}", dir.display())))?;

    let eval: EvalResult =
        serde_json::from_str(&std::fs::read_to_string(dir.join("eval.json")).map_err(|e| {
            contract(anyhow!("run {} is missing eval.json: {e}", dir.display()))
        })?)
        .map_err(|e| contract(anyhow!("run {}: bad eval.json: {e}", dir.display())))?;

    let mut weights = Vec::new();
    if let Ok(text) = std::fs::read_to_string(dir.join("weights.jsonl")) {
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value =
                serde_json::from_str(line).map_err(|e| contract(anyhow!("weights.jsonl: {e}")))?;
            if let Some(instances) = v["table"]["instances"].as_array() {
                for inst in instances {
                    if let Some(w) = inst["weight"].as_f64() {
                        weights.push(w);
                    }
                }
            }
        }
    }

    Ok(RunInfo {
        dir: dir.to_path_buf(),
        mode: run_cfg.train.mode.as_str().to_string(),
        seed: run_cfg.train.seed,
        image_size: run_cfg.synthetic.image_size,
        metrics,
        eval,
        weights,
    })
}

/// `report`: cross-run comparison table, weight histograms, mAP curves and
/// optional detection renders.
pub fn cmd_report(
    runs: &[PathBuf],
    out: &Path,
    render_data: Option<&Path>,
    render_count: usize,
) -> Result<(), CmdError> {
    if runs.is_empty() {
        return Err(contract(anyhow!("report needs at least one run directory")));
    }
    let infos: Vec<RunInfo> = runs.iter().map(|d| read_run(d)).collect::<Result<_, _>>()?;
    std::fs::create_dir_all(out).map_err(|e| contract(anyhow!("{e}")))?;

    // comparison.csv
    let mut csv = String::from("mode,seed,map50,ap_small,ap_medium,ap_large,params,gflops\n");
    for info in &infos {
        let ck = load_checkpoint(&info.dir.join("checkpoint.bin"))
            .map_err(|e| contract(anyhow!("run {}: {e}", info.dir.display())))?;
        let stats = model_stats(&ck, info.image_size).map_err(|e| internal(anyhow!("{e}")))?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{:.6},{},{},{},{},{:.6}\n",
            info.mode,
            info.seed,
            info.eval.map50,
            opt(info.eval.ap_small),
            opt(info.eval.ap_medium),
            opt(info.eval.ap_large),
            stats.parameter_count,
            stats.gflops(),
        ));
    }
    std::fs::write(out.join("comparison.csv"), csv).map_err(|e| contract(anyhow!("{e}")))?;

    // weight histogram: per-run instance weights from the final epoch
    let hist_series: Vec<(String, Vec<f64>)> = infos
        .iter()
        .filter(|i| !i.weights.is_empty())
        .map(|i| (format!("{}-s{}", i.mode, i.seed), i.weights.clone()))
        .collect();
    if !hist_series.is_empty() {
        plot::histogram(
            &hist_series,
            0.0,
            1.05,
            42,
            "aid instance weights",
            &out.join("weights_hist.png"),
        )
        .map_err(|e| internal(anyhow!("{e}")))?;
    }

    // validation mAP per epoch
    let curve_series: Vec<(String, Vec<(f64, f64)>)> = infos
        .iter()
        .map(|i| {
            (
                format!("{}-s{}", i.mode, i.seed),
                i.metrics.iter().map(|m| (m.epoch as f64, m.val_map50)).collect(),
            )
        })
        .collect();
    plot::line_chart(&curve_series, "validation map50 per epoch", "map50", &out.join("map_curve.png"))
        .map_err(|e| internal(anyhow!("{e}")))?;

    if let Some(data_dir) = render_data {
        let dataset = load_dataset(data_dir)
            .map_err(|e| contract(anyhow!("loading render data {}: {e}", data_dir.display())))?;
        let renders_dir = out.join("renders");
        std::fs::create_dir_all(&renders_dir).map_err(|e| contract(anyhow!("{e}")))?;
        let models: Vec<(String, aid_core::detector::DetectorModel)> = infos
            .iter()
            .map(|info| {
                let (model, _) = load_checkpoint(&info.dir.join("checkpoint.bin"))
                    .and_then(|c| c.into_model())
                    .map_err(|e| contract(anyhow!("run {}: {e}", info.dir.display())))?;
                Ok((format!("{}-s{}", info.mode, info.seed), model))
            })
            .collect::<Result<_, CmdError>>()?;
        let decode_params = aid_core::detector::DecodeParams {
            score_threshold: 0.3,
            ..aid_core::detector::DecodeParams::default()
        };
        for record in dataset.samples.iter().take(render_count) {
            let sample = record.load_sample().map_err(|e| internal(anyhow!("{e}")))?;
            let mut panels: Vec<(String, Vec<aid_core::types::Detection>)> = vec![(
                "ground truth".into(),
                sample
                    .instances
                    .iter()
                    .map(|inst| aid_core::types::Detection {
                        class_id: inst.class_id,
                        bbox: inst.bbox,
                        score: 1.0,
                    })
                    .collect(),
            )];
            for (label, model) in &models {
                let (_, outputs) = model.forward(&sample.pixels).map_err(|e| internal(anyhow!("{e}")))?;
                let dets = decode(
                    &outputs,
                    &decode_params,
                    sample.pixels.w as f64,
                    sample.pixels.h as f64,
                );
                panels.push((label.clone(), dets));
            }
            render::side_by_side(
                &sample.pixels,
                &panels,
                &renders_dir.join(format!("{}.png", record.image_id)),
            )
            .map_err(|e| internal(anyhow!("{e}")))?;
        }
    }

    println!("report written to {}", out.display());
    Ok(())
}

/// `RunRecord` summaries are also consumed by tests.
pub fn read_summary(dir: &Path) -> Result<RunRecord, CmdError> {
    let text = std::fs::read_to_string(dir.join("summary.json"))
        .map_err(|e| contract(anyhow!("{e}")))?;
    serde_json::from_str(&text).map_err(|e| contract(anyhow!("{e}")))
}
