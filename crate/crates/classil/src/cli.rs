//! `classil run | render | metrics`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use classil_core::metrics::MetricsReport;

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::recipes::{expand, Recipe, Variant, HAUG_CUTOUT, LABEL_SMOOTHING, MIXUP_ALPHA};
use crate::render::render;
use crate::results::{read_accuracy_matrix, read_json, ACCURACY_FILE, METRICS_FILE};
use crate::runner::{recipe_dir, run_recipe, LogObserver};

#[derive(Debug, Parser)]
#[command(name = "classil", version, about = "Class-incremental learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a recipe or a single configuration.
    Run(RunArgs),
    /// Render tables and plots of a recipe results directory.
    Render {
        results_dir: PathBuf,
        /// Output directory (defaults to the results directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a run's metrics and check them against its accuracy matrix.
    Metrics {
        run_dir: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
}

/// Later sources win: preset, then `--config`, then flags.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// desk, ablation (ablation-fig4), regularizers (regularizers-table2),
    /// overfit (overfit-sec52), sota, icarl-parallels.
    #[arg(long)]
    pub recipe: Option<String>,
    /// Base settings: desk or cifar100 (default: desk for the desk recipe,
    /// cifar100 otherwise).
    #[arg(long)]
    pub preset: Option<String>,
    /// TOML or JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Any config field as `dotted.path=value` (TOML literal); repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub base_count: Option<usize>,
    #[arg(long)]
    pub num_tasks: Option<usize>,
    #[arg(long)]
    pub class_order_seed: Option<u64>,
    /// Exemplar memory capacity K.
    #[arg(long)]
    pub memory: Option<usize>,
    #[arg(long)]
    pub epochs_base: Option<usize>,
    #[arg(long)]
    pub epochs_incremental: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda_base: Option<f64>,
    /// sep or comb.
    #[arg(long)]
    pub softmax: Option<String>,
    #[arg(long)]
    pub kd: Option<bool>,
    #[arg(long)]
    pub low_lr: Option<bool>,
    #[arg(long)]
    pub adaptive_weighting: Option<bool>,
    /// cosine or dot.
    #[arg(long)]
    pub head: Option<String>,
    /// cnn or nme.
    #[arg(long)]
    pub classifier: Option<String>,
    /// none, sd, h-aug, ls or mixup.
    #[arg(long)]
    pub regularizer: Option<String>,
    /// Directory of the CIFAR-100 binaries.
    #[arg(long)]
    pub data_path: Option<PathBuf>,
    #[arg(long)]
    pub checkpoints: Option<bool>,
    /// Print the expanded variants as TOML and exit.
    #[arg(long)]
    pub dry_run: bool,
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

impl RunArgs {
    /// Flag overrides as `path=value` assignments, in application order.
    fn assignments(&self) -> Result<Vec<String>> {
        let mut out = self.set.clone();
        let mut push = |path: &str, value: Option<String>| {
            if let Some(v) = value {
                out.push(format!("{path}={v}"));
            }
        };
        push("seeds", self.seeds.as_ref().map(|s| format!("{s:?}")));
        push("output_dir", self.output.as_ref().map(|p| quoted(&p.to_string_lossy())));
        push("base_count", self.base_count.map(|v| v.to_string()));
        push("num_tasks", self.num_tasks.map(|v| v.to_string()));
        push("class_order_seed", self.class_order_seed.map(|v| v.to_string()));
        push("memory_capacity", self.memory.map(|v| v.to_string()));
        push("train.epochs_base", self.epochs_base.map(|v| v.to_string()));
        push("train.epochs_incremental", self.epochs_incremental.map(|v| v.to_string()));
        push("train.batch_size", self.batch_size.map(|v| v.to_string()));
        push("train.lambda_base", self.lambda_base.map(|v| format!("{v:?}")));
        push("train.softmax_mode", self.softmax.as_deref().map(quoted));
        push("train.kd_enabled", self.kd.map(|v| v.to_string()));
        push("train.low_lr", self.low_lr.map(|v| v.to_string()));
        push("train.adaptive_weighting", self.adaptive_weighting.map(|v| v.to_string()));
        push("head", self.head.as_deref().map(quoted));
        push("train.classifier", self.classifier.as_deref().map(quoted));
        push("save_checkpoints", self.checkpoints.map(|v| v.to_string()));
        if let Some(r) = &self.regularizer {
            let table = match r.as_str() {
                "none" | "sd" => format!("{{kind={}}}", quoted(r)),
                "h-aug" => format!("{{kind=\"h-aug\", cutout={HAUG_CUTOUT}}}"),
                "ls" => format!("{{kind=\"ls\", epsilon={LABEL_SMOOTHING:?}}}"),
                "mixup" => format!("{{kind=\"mixup\", alpha={MIXUP_ALPHA:?}}}"),
                other => {
                    return Err(HarnessError::Config(format!(
                        "regularizer: unknown `{other}` (none, sd, h-aug, ls, mixup)"
                    )))
                }
            };
            out.push(format!("train.regularizer={table}"));
        }
        Ok(out)
    }

    /// The fully resolved base config.
    pub fn base_config(&self) -> Result<ExperimentConfig> {
        if self.config.is_some() && self.preset.is_some() {
            return Err(HarnessError::Config("--config and --preset are mutually exclusive".into()));
        }
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(p)) => ExperimentConfig::preset(p)?,
            (None, None) if self.recipe.as_deref() == Some("desk") => ExperimentConfig::desk(),
            (None, None) => ExperimentConfig::cifar100(),
        };
        for a in self.assignments()? {
            cfg.set(&a)?;
        }
        if let Some(path) = &self.data_path {
            match &mut cfg.dataset {
                DatasetConfig::Cifar100 { path: p, .. } => *p = Some(path.clone()),
                other => {
                    return Err(HarnessError::Config(format!(
                        "--data-path applies to cifar100, the dataset is {}",
                        other.name()
                    )))
                }
            }
        }
        Ok(cfg)
    }

    pub fn recipe(&self) -> Result<Recipe> {
        let base = self.base_config()?;
        let recipe = match &self.recipe {
            Some(name) => expand(name, &base)?,
            None => Recipe {
                name: base.name.clone(),
                from_snapshots: base.train.snapshot_every.is_some(),
                variant: vec![Variant {
                    label: base.name.clone(),
                    config: base,
                }],
            },
        };
        for v in &recipe.variant {
            v.config.validate()?;
        }
        Ok(recipe)
    }
}

fn run(args: &RunArgs) -> Result<()> {
    let recipe = args.recipe()?;
    if args.dry_run {
        print!("{}", toml::to_string_pretty(&recipe).expect("recipe serializes to TOML"));
        return Ok(());
    }
    let index = run_recipe(&recipe, &mut LogObserver)?;
    let dir = recipe_dir(&recipe);
    let rendered = render(&dir, None)?;
    for w in &rendered.warnings {
        log::warn!("{w}");
    }
    println!("{} runs written to {}", index.runs.len(), dir.display());
    Ok(())
}

/// Recomputed headline metrics must match the stored report.
pub fn check_metrics(run_dir: &Path) -> Result<MetricsReport> {
    let report: MetricsReport = read_json(&run_dir.join(METRICS_FILE))?;
    let matrix = read_accuracy_matrix(&run_dir.join(ACCURACY_FILE))?;
    let avg = matrix
        .average_incremental_accuracy(matrix.num_steps())
        .map_err(|e| HarnessError::format(run_dir.join(ACCURACY_FILE), e))?;
    let forgetting = matrix
        .first_task_forgetting()
        .ok_or_else(|| HarnessError::format(run_dir.join(ACCURACY_FILE), "empty accuracy matrix"))?;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
    if !close(avg, report.avg_acc) || !close(forgetting, report.forgetting) {
        return Err(HarnessError::format(
            run_dir,
            format!(
                "stored avg acc {} / forgetting {} disagree with the accuracy matrix ({avg} / {forgetting})",
                report.avg_acc, report.forgetting
            ),
        ));
    }
    Ok(report)
}

fn print_report(r: &MetricsReport) {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("avg_acc            {:.4}", r.avg_acc);
    println!("forgetting         {:.4}", r.forgetting);
    println!("feature_retention  {}", opt(r.feature_retention));
    println!("ss_nll             {}", opt(r.ss_nll));
    println!("ss_acc             {}", opt(r.ss_acc));
    println!("ece                {:.4}", r.ece);
    println!("weight_norm_gap    {}", opt(r.weight_norm_gap));
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => run(&args),
        Command::Render { results_dir, out } => {
            let rendered = render(&results_dir, out.as_deref())?;
            for w in &rendered.warnings {
                eprintln!("warning: {w}");
            }
            for f in &rendered.files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Metrics { run_dir, json } => {
            let report = check_metrics(&run_dir)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            } else {
                print_report(&report);
            }
            Ok(())
        }
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
