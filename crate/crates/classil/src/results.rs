//! On-disk layout of finished runs.
//!
//! ```text
//! <output_dir>/<recipe>/index.json
//! <output_dir>/<recipe>/<variant>/seed-<s>/manifest.json
//!                                          accuracy_matrix.csv
//!                                          metrics.json
//!                                          steps.json
//!                                          training.csv
//!                                          memory/step_<i>.json
//!                                          checkpoints/step_<i>.json
//! ```
//!
//! Snapshot-seeded runs put an `epoch-<e>` directory between the variant
//! and the seed.

use std::fs;
use std::path::{Path, PathBuf};

use classil_core::experiment::{RunPlan, RunResult, StepRecord};
use classil_core::metrics::{AccuracyMatrix, MetricsReport};
use classil_core::protocol::ClassId;
use classil_core::trainer::Stage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

pub const INDEX_FILE: &str = "index.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const ACCURACY_FILE: &str = "accuracy_matrix.csv";
pub const STEPS_FILE: &str = "steps.json";
pub const TRAINING_FILE: &str = "training.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub num_classes: usize,
    pub sample_shape: Vec<usize>,
    pub train_len: usize,
    pub test_len: usize,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub harness_version: String,
    pub recipe: String,
    pub label: String,
    pub seed: u64,
    /// Base-training epoch of the checkpoint the run started from.
    pub snapshot_epoch: Option<usize>,
    pub config: ExperimentConfig,
    pub plan: RunPlan,
    pub class_order: Vec<ClassId>,
    pub dataset: DatasetSummary,
}

/// One line of the index: where a run lives and its headline numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub label: String,
    pub seed: u64,
    pub snapshot_epoch: Option<usize>,
    /// Relative to the index file.
    pub dir: PathBuf,
    pub report: MetricsReport,
    /// Accuracy over all seen classes after each step.
    pub overall_accuracy: Vec<f64>,
    pub weight_norm_old: Option<f64>,
    pub weight_norm_new: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub recipe: String,
    pub runs: Vec<RunSummary>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serializes to JSON");
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::format(path, e))
}

/// Relative directory of one run inside its recipe directory.
pub fn run_dir(variant: &str, snapshot_epoch: Option<usize>, seed: u64) -> PathBuf {
    let mut p = PathBuf::from(variant);
    if let Some(e) = snapshot_epoch {
        p.push(format!("epoch-{e}"));
    }
    p.push(format!("seed-{seed}"));
    p
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_run(dir: &Path, manifest: &Manifest, result: &RunResult, save_checkpoints: bool) -> Result<RunSummary> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_json(&dir.join(MANIFEST_FILE), manifest)?;
    write_json(&dir.join(METRICS_FILE), &result.report)?;
    write_accuracy_matrix(&dir.join(ACCURACY_FILE), &result.accuracy)?;
    write_training(&dir.join(TRAINING_FILE), &result.steps)?;
    let steps: Vec<StepRecord> = result
        .steps
        .iter()
        .map(|s| StepRecord {
            memory: None,
            ..s.clone()
        })
        .collect();
    write_json(&dir.join(STEPS_FILE), &steps)?;
    for s in &result.steps {
        if let Some(dump) = &s.memory {
            write_json(&dir.join("memory").join(format!("step_{}.json", s.step)), dump)?;
        }
    }
    if save_checkpoints {
        for (i, model) in result.models.iter().enumerate() {
            write_json(&dir.join("checkpoints").join(format!("step_{i}.json")), model.model())?;
        }
    }
    let last = result.steps.last();
    Ok(RunSummary {
        variant: manifest.config.name.clone(),
        label: manifest.label.clone(),
        seed: manifest.seed,
        snapshot_epoch: manifest.snapshot_epoch,
        dir: run_dir(&manifest.config.name, manifest.snapshot_epoch, manifest.seed),
        report: result.report.clone(),
        overall_accuracy: result.accuracy.overall().to_vec(),
        weight_norm_old: last.and_then(|s| s.weight_norm_old),
        weight_norm_new: last.and_then(|s| s.weight_norm_new),
    })
}

/// `step,overall,task_0,...,task_N`; tasks not yet seen are empty cells.
pub fn write_accuracy_matrix(path: &Path, matrix: &AccuracyMatrix) -> Result<()> {
    let steps = matrix.num_steps();
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::format(path, e))?;
    let mut header = vec!["step".to_string(), "overall".to_string()];
    header.extend((0..steps).map(|t| format!("task_{t}")));
    w.write_record(&header).map_err(|e| HarnessError::format(path, e))?;
    for step in 0..steps {
        let mut row = vec![step.to_string(), matrix.overall()[step].to_string()];
        for task in 0..steps {
            row.push(matrix.entry(step, task).map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&row).map_err(|e| HarnessError::format(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_accuracy_matrix(path: &Path) -> Result<AccuracyMatrix> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::format(path, e))?;
    let mut matrix = AccuracyMatrix::new();
    for (i, record) in r.records().enumerate() {
        let record = record.map_err(|e| HarnessError::format(path, e))?;
        let num = |s: &str| s.parse::<f64>().map_err(|e| HarnessError::format(path, format!("row {}: {e}", i + 1)));
        let overall = num(record.get(1).unwrap_or(""))?;
        let per_task = record
            .iter()
            .skip(2)
            .take(i + 1)
            .map(num)
            .collect::<Result<Vec<f64>>>()?;
        matrix
            .push_step(per_task, overall)
            .map_err(|e| HarnessError::format(path, format!("row {}: {e}", i + 1)))?;
    }
    Ok(matrix)
}

/// Per-epoch losses of every training stage.
pub fn write_training(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::format(path, e))?;
    w.write_record(["step", "stage", "generation", "epoch", "lr", "loss", "ce_new", "ce_exemplar", "kd_new", "kd_exemplar"])
        .map_err(|e| HarnessError::format(path, e))?;
    for rec in steps.iter().flat_map(|s| &s.training).flat_map(|t| &t.epochs) {
        let (stage, generation) = match rec.stage {
            Stage::Base => ("base", String::new()),
            Stage::SelfDistill { generation } => ("self-distill", generation.to_string()),
            Stage::Incremental => ("incremental", String::new()),
        };
        let t = rec.terms;
        w.write_record([
            rec.step.to_string(),
            stage.to_string(),
            generation,
            rec.epoch.to_string(),
            rec.lr.to_string(),
            rec.loss.to_string(),
            t.ce_new.to_string(),
            t.ce_exemplar.to_string(),
            t.kd_new.to_string(),
            t.kd_exemplar.to_string(),
        ])
        .map_err(|e| HarnessError::format(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// `(step, stage, loss)` rows of a `training.csv`.
pub fn read_training_losses(path: &Path) -> Result<Vec<(usize, String, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::format(path, e))?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| HarnessError::format(path, e))?;
        let step = record[0].parse().map_err(|e| HarnessError::format(path, format!("step: {e}")))?;
        let loss = record[5].parse().map_err(|e| HarnessError::format(path, format!("loss: {e}")))?;
        out.push((step, record[1].to_string(), loss));
    }
    Ok(out)
}

impl Index {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(INDEX_FILE))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(INDEX_FILE), self)
    }

    /// Replaces any earlier entry for the same run.
    pub fn upsert(&mut self, run: RunSummary) {
        self.runs.retain(|r| r.dir != run.dir);
        self.runs.push(run);
    }
}
