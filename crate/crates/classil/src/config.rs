//! Experiment configuration: what to run, on which data, where to write it.
//!
//! Configs are TOML (or JSON, chosen by file extension). Any field can be
//! overridden with a dotted `path=value` assignment, the value being a TOML
//! literal: `train.lambda_base=2`, `train.softmax_mode="comb"`,
//! `seeds=[0,1,2]`.

use std::path::{Path, PathBuf};

use classil_core::experiment::RunPlan;
use classil_core::memory::exemplars_per_class;
use classil_core::metrics::ProbeConfig;
use classil_core::model::HeadMode;
use classil_core::nn::ExtractorSpec;
use classil_core::optim::LrSchedule;
use classil_core::protocol::ClassTaskSchedule;
use classil_core::regularizers::{BaselineAugment, PixelRange};
use classil_core::toy::DeskSpec;
use classil_core::trainer::{SelfDistillConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::data::{CIFAR100_MEAN, CIFAR100_STD};
use crate::error::{HarnessError, Result};

/// Environment variable holding the directory that relative dataset paths
/// are resolved against.
pub const DATA_ROOT_ENV: &str = "CLASSIL_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    /// Seeded synthetic Gaussian clusters with superclass structure.
    Desk(DeskSpec),
    /// The binary CIFAR-100 distribution (`train.bin`, `test.bin`).
    Cifar100 {
        /// Directory holding the binary files; defaults to
        /// `$CLASSIL_DATA_ROOT/cifar-100-binary`.
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default = "yes")]
        coarse_labels: bool,
    },
    /// Headerless or headed CSV rows `fine,coarse,v0,v1,...` (see the README).
    Csv {
        train: PathBuf,
        test: PathBuf,
        sample_shape: Vec<usize>,
        num_classes: usize,
        #[serde(default)]
        coarse_labels: bool,
    },
}

fn yes() -> bool {
    true
}

impl DatasetConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetConfig::Desk(_) => "desk",
            DatasetConfig::Cifar100 { .. } => "cifar100",
            DatasetConfig::Csv { .. } => "csv",
        }
    }

    /// Value range of the stored pixels when they are normalized images.
    pub fn pixel_range(&self) -> Option<PixelRange> {
        match self {
            DatasetConfig::Cifar100 { .. } => Some(PixelRange::normalized(&CIFAR100_MEAN, &CIFAR100_STD)),
            _ => None,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetConfig::Desk(spec) => spec.num_classes,
            DatasetConfig::Cifar100 { .. } => 100,
            DatasetConfig::Csv { num_classes, .. } => *num_classes,
        }
    }
}

/// Resolves a dataset path: absolute paths as is, relative ones against
/// `$CLASSIL_DATA_ROOT` when set.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => Path::new(&root).join(path),
        None => path.to_path_buf(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    pub base_count: usize,
    pub num_tasks: usize,
    pub class_order_seed: u64,
    /// One run per seed.
    pub seeds: Vec<u64>,
    pub memory_capacity: usize,
    pub extractor: ExtractorSpec,
    pub head: HeadMode,
    pub cosine_scale_init: f64,
    pub normalize_memory_features: bool,
    pub train: TrainConfig,
    /// Crop and flip for images; omitted means off.
    #[serde(default)]
    pub baseline_augment: Option<BaselineAugment>,
    pub ece_bins: usize,
    /// Linear-probe budget for feature retention; omitted means skipped.
    #[serde(default)]
    pub feature_retention: Option<ProbeConfig>,
    pub output_dir: PathBuf,
    /// Write model checkpoints next to the metrics.
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::cifar100()
    }
}

impl ExperimentConfig {
    /// CIFAR-100, ResNet-32, 50 base classes + 5 tasks, K = 2000.
    pub fn cifar100() -> Self {
        let plan = RunPlan::default();
        Self {
            name: "ccil".into(),
            dataset: DatasetConfig::Cifar100 {
                path: None,
                coarse_labels: true,
            },
            base_count: plan.base_count,
            num_tasks: plan.num_tasks,
            class_order_seed: plan.class_order_seed,
            seeds: vec![0],
            memory_capacity: plan.memory_capacity,
            extractor: plan.extractor,
            head: plan.head,
            cosine_scale_init: plan.cosine_scale_init,
            normalize_memory_features: plan.normalize_memory_features,
            train: plan.train,
            baseline_augment: plan.baseline_augment,
            ece_bins: plan.ece_bins,
            feature_retention: Some(ProbeConfig::default()),
            output_dir: PathBuf::from("results"),
            save_checkpoints: true,
        }
    }

    /// The synthetic benchmark: 20 classes in 5 superclasses, 8 base
    /// classes + 4 tasks of 3, a two-layer MLP, minutes on a CPU.
    pub fn desk() -> Self {
        let probe = ProbeConfig {
            epochs: 30,
            batch_size: 32,
            ..ProbeConfig::default()
        };
        Self {
            name: "ccil".into(),
            dataset: DatasetConfig::Desk(DeskSpec::default()),
            base_count: 8,
            num_tasks: 4,
            class_order_seed: 1993,
            seeds: vec![0, 1, 2],
            memory_capacity: 40,
            extractor: ExtractorSpec::Mlp {
                hidden: vec![64, 64],
                batch_norm: false,
            },
            head: HeadMode::Cosine,
            cosine_scale_init: 1.0,
            normalize_memory_features: false,
            train: desk_train_config(),
            baseline_augment: None,
            ece_bins: classil_core::metrics::DEFAULT_ECE_BINS,
            feature_retention: Some(probe),
            output_dir: PathBuf::from("results"),
            save_checkpoints: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cifar100" => Ok(Self::cifar100()),
            "desk" => Ok(Self::desk()),
            other => Err(HarnessError::Config(format!(
                "unknown preset `{other}` (expected cifar100 or desk)"
            ))),
        }
    }

    pub fn plan(&self, seed: u64) -> RunPlan {
        RunPlan {
            base_count: self.base_count,
            num_tasks: self.num_tasks,
            class_order_seed: self.class_order_seed,
            seed,
            memory_capacity: self.memory_capacity,
            extractor: self.extractor.clone(),
            head: self.head,
            cosine_scale_init: self.cosine_scale_init,
            normalize_memory_features: self.normalize_memory_features,
            train: self.train.clone(),
            baseline_augment: self.baseline_augment,
            pixel_range: self.dataset.pixel_range(),
            ece_bins: self.ece_bins,
            feature_retention: self.feature_retention.clone(),
        }
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds: at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return bad(format!("seeds: duplicate entries in {:?}", self.seeds));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("name: `{}` must be non-empty and free of path separators", self.name));
        }
        self.plan(self.seeds[0])
            .validate()
            .map_err(|e| HarnessError::Config(format!("train: {e}")))?;
        ClassTaskSchedule::build(self.dataset.num_classes(), self.base_count, self.num_tasks, self.class_order_seed)
            .map_err(|e| HarnessError::Config(format!("base_count/num_tasks: {e}")))?;
        if self.memory_capacity > 0 {
            exemplars_per_class(self.memory_capacity, self.dataset.num_classes())
                .map_err(|e| HarnessError::Config(format!("memory_capacity: {e}")))?;
        }
        if let DatasetConfig::Csv { sample_shape, num_classes, .. } = &self.dataset {
            if sample_shape.is_empty() || sample_shape.contains(&0) || *num_classes == 0 {
                return bad("dataset: csv needs a non-empty sample_shape and num_classes".into());
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Applies one `dotted.path=value` assignment.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("`{assignment}` is not of the form path=value")))?;
        let path = path.trim();
        let value = parse_literal(raw.trim());
        let mut root = toml::Value::try_from(&*self).expect("config serializes to TOML");
        let mut cursor = &mut root;
        let keys: Vec<&str> = path.split('.').collect();
        for (i, key) in keys.iter().enumerate() {
            let table = cursor
                .as_table_mut()
                .ok_or_else(|| HarnessError::Config(format!("{path}: `{}` is not a table", keys[..i].join("."))))?;
            if i + 1 == keys.len() {
                table.insert((*key).to_string(), value);
                break;
            }
            cursor = table
                .entry((*key).to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(format!("{path}: {}", e.message())))?;
        Ok(())
    }
}

/// A TOML literal, or the raw text as a string when it does not parse.
fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Training settings of the desk benchmark.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        epochs_base: 30,
        epochs_incremental: 30,
        batch_size: 32,
        base_schedule: LrSchedule::Cosine { start: 0.1, end: 1e-4 },
        incremental_schedule: LrSchedule::Cosine { start: 0.01, end: 1e-4 },
        lambda_base: 1.0,
        self_distill: SelfDistillConfig {
            epochs_per_generation: 15,
            ..SelfDistillConfig::default()
        },
        ..TrainConfig::default()
    }
}
