//! Executes expanded recipes and persists every run.

use std::path::{Path, PathBuf};

use classil_core::experiment::{run_experiment, run_from_base, train_base, BaseOutcome, RunResult};
use classil_core::trainer::{Event, Observer};

use crate::config::DatasetConfig;
use crate::data::{load, LoadedData};
use crate::error::{HarnessError, Result};
use crate::recipes::{Recipe, Variant};
use crate::results::{run_dir, write_run, DatasetSummary, Index, Manifest, RunSummary};

/// Logs stage starts and (at debug level) per-epoch losses.
pub struct LogObserver;

impl Observer for LogObserver {
    fn on_event(&mut self, event: &Event) {
        match event {
            Event::TrainingStarted { step, stage } => log::info!("step {step}: {stage:?} training"),
            Event::EpochFinished(r) => log::debug!(
                "step {} {:?} epoch {} lr {:.5} loss {:.4}",
                r.step,
                r.stage,
                r.epoch,
                r.lr,
                r.loss
            ),
            Event::SnapshotTaken { .. } | Event::MemoryUpdated { .. } => {}
        }
    }
}

/// Directory of a recipe's results.
pub fn recipe_dir(recipe: &Recipe) -> PathBuf {
    let out = recipe
        .variant
        .first()
        .map(|v| v.config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    out.join(&recipe.name)
}

/// Runs every variant and seed of a recipe, updating the index after each
/// run so an interrupted recipe leaves usable partial results.
pub fn run_recipe(recipe: &Recipe, observer: &mut dyn Observer) -> Result<Index> {
    for v in &recipe.variant {
        v.config.validate()?;
    }
    let dir = recipe_dir(recipe);
    let mut index = Index::load(&dir).unwrap_or_else(|_| Index {
        recipe: recipe.name.clone(),
        runs: Vec::new(),
    });
    index.recipe = recipe.name.clone();
    let mut cache: Option<(DatasetConfig, LoadedData)> = None;
    for v in &recipe.variant {
        let data = match &cache {
            Some((cfg, data)) if *cfg == v.config.dataset => data,
            _ => {
                log::info!("loading dataset {}", v.config.dataset.name());
                let loaded = load(&v.config.dataset)?;
                &cache.insert((v.config.dataset.clone(), loaded)).1
            }
        };
        for &seed in &v.config.seeds {
            for run in run_variant(recipe, v, seed, data, &dir, observer)? {
                index.upsert(run);
                index.save(&dir)?;
            }
        }
    }
    Ok(index)
}

fn run_variant(
    recipe: &Recipe,
    v: &Variant,
    seed: u64,
    data: &LoadedData,
    dir: &Path,
    observer: &mut dyn Observer,
) -> Result<Vec<RunSummary>> {
    let plan = v.config.plan(seed);
    let context = |what: &str| format!("{} / {} seed {seed}: {what}", recipe.name, v.label);
    log::info!("{} / {} seed {seed}", recipe.name, v.label);
    if !recipe.from_snapshots {
        let result = run_experiment(&plan, &data.train, &data.test, observer).map_err(|e| HarnessError::core(context("run"), e))?;
        return Ok(vec![persist(recipe, v, seed, None, &plan, data, &result, dir)?]);
    }
    let base = train_base(&plan, &data.train, observer).map_err(|e| HarnessError::core(context("base training"), e))?;
    if base.checkpoints.is_empty() {
        return Err(HarnessError::Config(format!(
            "{}: snapshot recipe needs train.snapshot_every <= train.epochs_base",
            v.label
        )));
    }
    let mut out = Vec::with_capacity(base.checkpoints.len());
    for (epoch, snapshot) in &base.checkpoints {
        let start = BaseOutcome {
            model: snapshot.clone(),
            training: Vec::new(),
            checkpoints: Vec::new(),
        };
        let result = run_from_base(&plan, start, &data.train, &data.test, observer)
            .map_err(|e| HarnessError::core(context(&format!("class-IL from epoch {epoch}")), e))?;
        out.push(persist(recipe, v, seed, Some(*epoch), &plan, data, &result, dir)?);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn persist(
    recipe: &Recipe,
    v: &Variant,
    seed: u64,
    snapshot_epoch: Option<usize>,
    plan: &classil_core::experiment::RunPlan,
    data: &LoadedData,
    result: &RunResult,
    dir: &Path,
) -> Result<RunSummary> {
    let manifest = Manifest {
        harness_version: env!("CARGO_PKG_VERSION").to_string(),
        recipe: recipe.name.clone(),
        label: v.label.clone(),
        seed,
        snapshot_epoch,
        config: v.config.clone(),
        plan: plan.clone(),
        class_order: result.schedule.class_order().to_vec(),
        dataset: DatasetSummary {
            name: v.config.dataset.name().to_string(),
            num_classes: data.train.num_classes(),
            sample_shape: data.train.sample_shape().to_vec(),
            train_len: data.train.len(),
            test_len: data.test.len(),
        },
    };
    let path = dir.join(run_dir(&v.config.name, snapshot_epoch, seed));
    let summary = write_run(&path, &manifest, result, v.config.save_checkpoints)?;
    log::info!(
        "{} seed {seed}: avg acc {:.2}, forgetting {:.2}",
        v.label,
        summary.report.avg_acc,
        summary.report.forgetting
    );
    Ok(summary)
}
