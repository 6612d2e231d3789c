//! End-to-end class-incremental runs: base task, exemplar bookkeeping,
//! incremental steps, per-step evaluation and the final metrics.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Spans;
use crate::memory::{exemplars_per_class, update_exemplar_sets, ExemplarMemory, MemoryDump, NewClassData, UpdateReport};
use crate::metrics::{confidences, ece, linear_probe_accuracy, secondary_metrics, task_accuracies, weight_norm_gap, AccuracyMatrix, MetricsReport, ProbeConfig, Provenance, DEFAULT_ECE_BINS};
use crate::model::{HeadMode, IncrementalClassifier, ModelSnapshot};
use crate::nn::ExtractorSpec;
use crate::protocol::{ClassId, ClassTaskSchedule, Dataset};
use crate::regularizers::{default_policy_pool, BaselineAugment, DataPipeline, PixelRange, Regularizer};
use crate::rng::SeedStream;
use crate::tensor::Tensor;
use crate::trainer::{exemplar_means, incremental_step, predict_scores, run_self_distillation, train_base_task, ClassifierKind, Event, Observer, StageSummary, TrainConfig, TrainContext};

/// Everything the core needs to execute one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPlan {
    pub base_count: usize,
    pub num_tasks: usize,
    /// Seed of the class shuffle.
    pub class_order_seed: u64,
    /// Seed of every other stochastic component.
    pub seed: u64,
    pub memory_capacity: usize,
    pub extractor: ExtractorSpec,
    pub head: HeadMode,
    pub cosine_scale_init: f64,
    /// Rank exemplars by distance between L2-normalized features.
    pub normalize_memory_features: bool,
    pub train: TrainConfig,
    /// Random crop and flip for image inputs.
    pub baseline_augment: Option<BaselineAugment>,
    /// Value range of stored pixels, for colour augmentation.
    pub pixel_range: Option<PixelRange>,
    pub ece_bins: usize,
    /// Linear-probe budget for feature retention; `None` skips it.
    pub feature_retention: Option<ProbeConfig>,
}

impl Default for RunPlan {
    fn default() -> Self {
        Self {
            base_count: 50,
            num_tasks: 5,
            class_order_seed: 1993,
            seed: 0,
            memory_capacity: 2000,
            extractor: ExtractorSpec::resnet32(),
            head: HeadMode::Cosine,
            cosine_scale_init: 1.0,
            normalize_memory_features: false,
            train: TrainConfig::default(),
            baseline_augment: Some(BaselineAugment::default()),
            pixel_range: None,
            ece_bins: DEFAULT_ECE_BINS,
            feature_retention: None,
        }
    }
}

impl RunPlan {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.ece_bins == 0 {
            return Err(Error::InvalidArgument("ece_bins must be positive".into()));
        }
        if self.train.classifier == ClassifierKind::Nme && self.memory_capacity == 0 {
            return Err(Error::InvalidArgument("nearest-mean evaluation needs an exemplar memory".into()));
        }
        Ok(())
    }

    pub fn pipeline(&self, sample_shape: &[usize]) -> Result<DataPipeline> {
        let image = sample_shape.len() == 3;
        let channels = if image { sample_shape[0] } else { 1 };
        let range = self.pixel_range.clone().unwrap_or_else(|| PixelRange::unit(channels));
        let heavy = match self.train.regularizer {
            Regularizer::HAug { cutout } => {
                if !image {
                    return Err(Error::InvalidArgument(
                        "heavy augmentation needs image samples [c, h, w]".into(),
                    ));
                }
                Some((default_policy_pool(), cutout))
            }
            _ => None,
        };
        Ok(DataPipeline {
            baseline: if image { self.baseline_augment } else { None },
            heavy,
            range,
        })
    }

    pub fn schedule(&self, total_classes: usize) -> Result<ClassTaskSchedule> {
        ClassTaskSchedule::build(total_classes, self.base_count, self.num_tasks, self.class_order_seed)
    }
}

/// Per-step record of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub new_classes: Vec<ClassId>,
    pub lambda: f64,
    pub weight_norm_old: Option<f64>,
    pub weight_norm_new: Option<f64>,
    pub task_accuracy: Vec<f64>,
    pub overall_accuracy: f64,
    pub memory: Option<MemoryDump>,
    pub memory_report: Option<UpdateReport>,
    pub teacher_fingerprint: Option<u64>,
    pub model_fingerprint: u64,
    pub training: Vec<StageSummary>,
}

/// A trained base model plus the base-stage records.
#[derive(Debug, Clone)]
pub struct BaseOutcome {
    pub model: ModelSnapshot,
    pub training: Vec<StageSummary>,
    /// `(completed epochs, snapshot)` when periodic checkpoints are enabled.
    pub checkpoints: Vec<(usize, ModelSnapshot)>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub schedule: ClassTaskSchedule,
    pub accuracy: AccuracyMatrix,
    pub steps: Vec<StepRecord>,
    pub report: MetricsReport,
    /// Model after every step, index = step.
    pub models: Vec<ModelSnapshot>,
    pub base_checkpoints: Vec<(usize, ModelSnapshot)>,
}

fn check_data(train: &Dataset, test: &Dataset) -> Result<()> {
    if train.num_classes() != test.num_classes() || train.sample_shape() != test.sample_shape() {
        return Err(Error::InvalidArgument("train and test splits disagree on classes or sample shape".into()));
    }
    Ok(())
}

/// Trains the base model (with self-distillation generations when the
/// regularizer asks for them).
pub fn train_base(plan: &RunPlan, train: &Dataset, observer: &mut dyn Observer) -> Result<BaseOutcome> {
    plan.validate()?;
    let schedule = plan.schedule(train.num_classes())?;
    let view = schedule.task_view(0, train)?;
    let seeds = SeedStream::new(plan.seed);
    let mut model = IncrementalClassifier::new(
        &plan.extractor,
        train.sample_shape(),
        plan.head,
        plan.base_count,
        plan.cosine_scale_init,
        &mut seeds.rng("init", 0),
    )?;
    let mut ctx = TrainContext::new(plan.seed, plan.pipeline(train.sample_shape())?, observer);
    let base = train_base_task(&mut model, &view, &plan.train, &mut ctx).map_err(|e| e.at_step(0))?;
    let mut training = alloc::vec![base.summary];
    if plan.train.regularizer == Regularizer::Sd {
        training.extend(run_self_distillation(&mut model, &view, &plan.train, &mut ctx).map_err(|e| e.at_step(0))?);
    }
    Ok(BaseOutcome {
        model: model.snapshot(),
        training,
        checkpoints: base.checkpoints,
    })
}

struct Evaluator<'a> {
    test: &'a Dataset,
    schedule: &'a ClassTaskSchedule,
    positions: Vec<usize>,
}

impl<'a> Evaluator<'a> {
    fn new(test: &'a Dataset, schedule: &'a ClassTaskSchedule) -> Self {
        Self {
            test,
            schedule,
            positions: schedule.positions(),
        }
    }

    /// Test samples of the classes seen by `step`, with their output targets.
    fn seen(&self, step: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let end = self.schedule.task_range(step)?.end;
        let idx: Vec<usize> = (0..self.test.len())
            .filter(|&i| self.positions[self.test.fine(i) as usize] < end)
            .collect();
        let targets = idx.iter().map(|&i| self.positions[self.test.fine(i) as usize]).collect();
        Ok((idx, targets))
    }

    fn scores(&self, model: &IncrementalClassifier, idx: &[usize], kind: ClassifierKind, memory: Option<&ExemplarMemory>) -> Result<Tensor> {
        let means = match (kind, memory) {
            (ClassifierKind::Nme, Some(m)) => Some(exemplar_means(model, m, model.num_classes())?),
            _ => None,
        };
        let mut data = Vec::with_capacity(idx.len() * model.num_classes());
        for chunk in idx.chunks(256) {
            let s = predict_scores(model, &self.test.batch(chunk), kind, means.as_deref())?;
            data.extend_from_slice(s.data());
        }
        Tensor::from_vec(&[idx.len(), model.num_classes()], data)
    }

    fn step_accuracy(&self, model: &IncrementalClassifier, step: usize, kind: ClassifierKind, memory: Option<&ExemplarMemory>) -> Result<(Vec<f64>, f64)> {
        let (idx, targets) = self.seen(step)?;
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!("no test samples for the classes of step {step}")));
        }
        let scores = self.scores(model, &idx, kind, memory)?;
        task_accuracies(&scores, &targets, step + 1, |p| self.schedule.step_of_position(p))
    }
}

/// Runs the incremental steps from a trained base model and computes every
/// metric.
pub fn run_from_base(
    plan: &RunPlan,
    base: BaseOutcome,
    train: &Dataset,
    test: &Dataset,
    observer: &mut dyn Observer,
) -> Result<RunResult> {
    plan.validate()?;
    check_data(train, test)?;
    let schedule = plan.schedule(train.num_classes())?;
    if base.model.num_classes() != plan.base_count {
        return Err(Error::Contract(format!(
            "base model has {} outputs, plan expects {}",
            base.model.num_classes(),
            plan.base_count
        )));
    }
    let seeds = SeedStream::new(plan.seed);
    let eval = Evaluator::new(test, &schedule);
    let kind = plan.train.classifier;
    let mut ctx = TrainContext::new(plan.seed, plan.pipeline(train.sample_shape())?, observer);
    let mut model = base.model.thaw();
    let mut memory = (plan.memory_capacity > 0).then(|| ExemplarMemory::new(plan.memory_capacity, train.sample_shape().to_vec()));
    let mut accuracy = AccuracyMatrix::new();
    let mut steps = Vec::with_capacity(schedule.num_steps());
    let mut models = Vec::with_capacity(schedule.num_steps());

    // Step 0: exemplars of the base classes come from the trained base model.
    let view0 = schedule.task_view(0, train)?;
    let mut report0 = None;
    if let Some(mem) = memory.as_mut() {
        let m = exemplars_per_class(plan.memory_capacity, plan.base_count).map_err(|e| e.at_step(0))?;
        let r = update_exemplar_sets(mem, &NewClassData::from_view(&view0), m, &model, seeds.seed("memory", 0), plan.normalize_memory_features)?;
        ctx.observer.on_event(&Event::MemoryUpdated {
            step: 0,
            exemplars: mem.len(),
        });
        report0 = Some(r);
    }
    let (acc0, all0) = eval.step_accuracy(&model, 0, kind, memory.as_ref()).map_err(|e| e.at_step(0))?;
    accuracy.push_step(acc0.clone(), all0)?;
    let (_, n0) = model.weight_norms(0..0, 0..plan.base_count)?;
    steps.push(StepRecord {
        step: 0,
        new_classes: view0.new_class_ids.clone(),
        lambda: 0.0,
        weight_norm_old: None,
        weight_norm_new: n0,
        task_accuracy: acc0,
        overall_accuracy: all0,
        memory: memory.as_ref().map(ExemplarMemory::dump),
        memory_report: report0,
        teacher_fingerprint: None,
        model_fingerprint: model.fingerprint(),
        training: base.training.clone(),
    });
    models.push(base.model.clone());

    for step in 1..schedule.num_steps() {
        let run = |model: &mut IncrementalClassifier, memory: &mut Option<ExemplarMemory>, ctx: &mut TrainContext<'_>| -> Result<StepRecord> {
            let view = schedule.task_view(step, train)?;
            let teacher = model.snapshot();
            ctx.observer.on_event(&Event::SnapshotTaken {
                step,
                fingerprint: teacher.fingerprint(),
            });
            let mut report = None;
            if let Some(mem) = memory.as_mut() {
                let m = exemplars_per_class(plan.memory_capacity, view.spans.total())?;
                report = Some(update_exemplar_sets(
                    mem,
                    &NewClassData::from_view(&view),
                    m,
                    &teacher,
                    seeds.seed("memory", step as u64),
                    plan.normalize_memory_features,
                )?);
                ctx.observer.on_event(&Event::MemoryUpdated { step, exemplars: mem.len() });
            }
            model.expand_head(view.spans.num_new(), &mut seeds.rng("head", step as u64))?;
            let empty = ExemplarMemory::new(0, train.sample_shape().to_vec());
            let summary = incremental_step(model, &teacher, memory.as_ref().unwrap_or(&empty), &view, &plan.train, ctx)?;
            let (task_accuracy, overall_accuracy) = eval.step_accuracy(model, step, kind, memory.as_ref())?;
            let spans: Spans = view.spans;
            let (old, new) = model.weight_norms(spans.old(), spans.new_span())?;
            Ok(StepRecord {
                step,
                new_classes: view.new_class_ids.clone(),
                lambda: summary.lambda,
                weight_norm_old: old,
                weight_norm_new: new,
                task_accuracy,
                overall_accuracy,
                memory: memory.as_ref().map(ExemplarMemory::dump),
                memory_report: report,
                teacher_fingerprint: Some(teacher.fingerprint()),
                model_fingerprint: model.fingerprint(),
                training: alloc::vec![summary],
            })
        };
        let rec = run(&mut model, &mut memory, &mut ctx).map_err(|e| e.at_step(step))?;
        accuracy.push_step(rec.task_accuracy.clone(), rec.overall_accuracy)?;
        steps.push(rec);
        models.push(model.snapshot());
    }

    let report = final_report(plan, &schedule, &accuracy, &steps, &models, train, test, &eval)?;
    Ok(RunResult {
        schedule,
        accuracy,
        steps,
        report,
        models,
        base_checkpoints: base.checkpoints,
    })
}

#[allow(clippy::too_many_arguments)]
fn final_report(
    plan: &RunPlan,
    schedule: &ClassTaskSchedule,
    accuracy: &AccuracyMatrix,
    steps: &[StepRecord],
    models: &[ModelSnapshot],
    train: &Dataset,
    test: &Dataset,
    eval: &Evaluator<'_>,
) -> Result<MetricsReport> {
    let first = &models[0];
    let last = models.last().expect("at least the base step");
    let avg_acc = accuracy.average_incremental_accuracy(schedule.num_steps())?;
    let forgetting = accuracy.first_task_forgetting().expect("matrix is non-empty");

    // Secondary information and calibration of the first-task model on the
    // first-task test data.
    let (idx, targets) = eval.seen(0)?;
    let logits = eval.scores(first.model(), &idx, ClassifierKind::Cnn, None)?;
    let ece_value = ece(&confidences(&logits, &targets), plan.ece_bins)?;
    let (ss_nll, ss_acc) = if test.has_coarse() {
        let map = test.superclass_map()?;
        let by_position: Vec<ClassId> = schedule.class_order().iter().map(|&c| map[c as usize]).collect();
        let s = secondary_metrics(&logits, &targets, &by_position[..plan.base_count])?;
        (Some(s.ss_nll), Some(s.ss_acc))
    } else {
        (None, None)
    };

    let feature_retention = match &plan.feature_retention {
        Some(probe) => {
            let joint = joint_accuracy(plan, train, test)?;
            let frozen = linear_probe_accuracy(last.model(), train, test, probe, plan.seed)?;
            Some(joint - frozen)
        }
        None => None,
    };
    let final_step = steps.last().expect("non-empty");
    let weight_norm_gap = match (final_step.weight_norm_old, final_step.weight_norm_new) {
        (Some(o), Some(n)) => Some(weight_norm_gap(o, n)),
        _ => None,
    };
    let report = MetricsReport {
        avg_acc,
        forgetting,
        feature_retention,
        ss_nll,
        ss_acc,
        ece: ece_value,
        weight_norm_gap,
        provenance: Provenance {
            first_model: first.fingerprint(),
            final_model: last.fingerprint(),
        },
    };
    report.validate()?;
    Ok(report)
}

/// Test accuracy of a model trained jointly on every class with the base
/// recipe, the upper reference for feature retention.
pub fn joint_accuracy(plan: &RunPlan, train: &Dataset, test: &Dataset) -> Result<f64> {
    let joint_plan = RunPlan {
        base_count: train.num_classes(),
        num_tasks: 0,
        ..plan.clone()
    };
    let base = train_base(&joint_plan, train, &mut ())?;
    let schedule = joint_plan.schedule(train.num_classes())?;
    let eval = Evaluator::new(test, &schedule);
    Ok(eval.step_accuracy(base.model.model(), 0, ClassifierKind::Cnn, None)?.1)
}

/// Base training followed by the incremental steps.
pub fn run_experiment(plan: &RunPlan, train: &Dataset, test: &Dataset, observer: &mut dyn Observer) -> Result<RunResult> {
    check_data(train, test)?;
    let base = train_base(plan, train, observer)?;
    run_from_base(plan, base, train, test, observer)
}
