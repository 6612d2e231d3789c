//! Base-task training, the incremental step, and self-distillation.
//!
//! Each incremental update consumes one mini-batch of new-class data and one
//! equally sized mini-batch of exemplars. The two forward/backward passes
//! accumulate into the same gradient buffers before a single optimizer step.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{adaptive_lambda, batch_cross_entropy, batch_new_class_ce, kd_loss_with_grad, BatchLoss, LossTerms, SoftmaxMode, Spans, Target};
use crate::memory::{Exemplar, ExemplarMemory, ExemplarSampler};
use crate::metrics::argmax;
use crate::model::{FeatureMap, IncrementalClassifier, ModelSnapshot};
use crate::optim::{LrSchedule, Sgd, SgdConfig};
use crate::protocol::TaskView;
use crate::regularizers::{mix_coefficient, DataPipeline, Regularizer};
use crate::rng::{shuffle, SeedStream};
use crate::tensor::{l2_distance, l2_norm, Tensor};

/// How predictions are formed at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    /// Argmax of the network's logits.
    #[default]
    Cnn,
    /// Nearest mean of exemplar features.
    Nme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfDistillConfig {
    pub generations: usize,
    pub epochs_per_generation: usize,
    pub schedule: LrSchedule,
    /// Weight of the distillation term against classification.
    pub kd_weight: f64,
    pub temperature: f64,
}

impl Default for SelfDistillConfig {
    fn default() -> Self {
        Self {
            generations: 4,
            epochs_per_generation: 70,
            schedule: LrSchedule::Cosine { start: 1e-1, end: 1e-3 },
            kd_weight: 1.0,
            temperature: 1.0,
        }
    }
}

/// Optimization and loss settings for one run. Defaults are the CIFAR-100
/// settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_base: usize,
    pub epochs_incremental: usize,
    pub batch_size: usize,
    pub base_schedule: LrSchedule,
    /// Used for incremental steps when `low_lr` is set; otherwise they
    /// reuse `base_schedule`.
    pub incremental_schedule: LrSchedule,
    pub low_lr: bool,
    pub sgd: SgdConfig,
    pub softmax_mode: SoftmaxMode,
    pub kd_enabled: bool,
    pub lambda_base: f64,
    /// Scale `lambda_base` with the old/new class ratio; constant otherwise.
    pub adaptive_weighting: bool,
    pub temperature: f64,
    pub classifier: ClassifierKind,
    pub regularizer: Regularizer,
    pub self_distill: SelfDistillConfig,
    /// Keep a base-model checkpoint every this many epochs.
    pub snapshot_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_base: 120,
            epochs_incremental: 240,
            batch_size: 100,
            base_schedule: LrSchedule::Cosine { start: 1e-1, end: 1e-4 },
            incremental_schedule: LrSchedule::Cosine { start: 1e-2, end: 1e-4 },
            low_lr: true,
            sgd: SgdConfig {
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            softmax_mode: SoftmaxMode::Sep,
            kd_enabled: true,
            lambda_base: 5.0,
            adaptive_weighting: true,
            temperature: 1.0,
            classifier: ClassifierKind::Cnn,
            regularizer: Regularizer::None,
            self_distill: SelfDistillConfig::default(),
            snapshot_every: None,
        }
    }
}

impl TrainConfig {
    /// ImageNet-100 settings.
    pub fn imagenet_subset() -> Self {
        Self {
            epochs_base: 70,
            epochs_incremental: 70,
            batch_size: 128,
            base_schedule: step_schedule(1e-1, &[30, 60]),
            incremental_schedule: step_schedule(1e-2, &[30, 60]),
            sgd: SgdConfig {
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            lambda_base: 20.0,
            self_distill: SelfDistillConfig {
                generations: 4,
                epochs_per_generation: 30,
                schedule: step_schedule(1e-2, &[10, 20]),
                ..SelfDistillConfig::default()
            },
            ..Self::default()
        }
    }

    /// Full ImageNet settings.
    pub fn imagenet() -> Self {
        Self {
            epochs_incremental: 40,
            incremental_schedule: step_schedule(1e-2, &[25, 35]),
            lambda_base: 600.0,
            self_distill: SelfDistillConfig {
                generations: 2,
                epochs_per_generation: 15,
                schedule: step_schedule(1e-2, &[8, 12]),
                ..SelfDistillConfig::default()
            },
            ..Self::imagenet_subset()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base_schedule.validate()?;
        self.incremental_schedule.validate()?;
        self.self_distill.schedule.validate()?;
        self.regularizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.low_lr && self.incremental_schedule.initial() > self.base_schedule.initial() {
            return Err(Error::Schedule(format!(
                "low-LR incremental rate {} exceeds base rate {}",
                self.incremental_schedule.initial(),
                self.base_schedule.initial()
            )));
        }
        if !(self.temperature > 0.0) || !(self.self_distill.temperature > 0.0) {
            return Err(Error::InvalidArgument("temperatures must be positive".into()));
        }
        if self.kd_enabled && !(self.lambda_base > 0.0) {
            return Err(Error::InvalidArgument("lambda_base must be positive".into()));
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::InvalidArgument("snapshot_every must be positive".into()));
        }
        Ok(())
    }

    /// Schedule actually used by incremental steps.
    pub fn step_schedule(&self) -> &LrSchedule {
        if self.low_lr {
            &self.incremental_schedule
        } else {
            &self.base_schedule
        }
    }

    /// Distillation weight at a step with the given spans.
    pub fn lambda(&self, spans: Spans) -> Result<f64> {
        if !self.kd_enabled || spans.num_old() == 0 {
            return Ok(0.0);
        }
        if self.adaptive_weighting {
            adaptive_lambda(spans.num_new(), spans.num_old(), self.lambda_base)
        } else {
            Ok(self.lambda_base)
        }
    }
}

fn step_schedule(start: f64, milestones: &[usize]) -> LrSchedule {
    LrSchedule::Step {
        start,
        milestones: milestones.to_vec(),
        factor: 10.0,
    }
}

/// Training phases reported to an [`Observer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Base,
    SelfDistill { generation: usize },
    Incremental,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    SnapshotTaken { step: usize, fingerprint: u64 },
    MemoryUpdated { step: usize, exemplars: usize },
    TrainingStarted { step: usize, stage: Stage },
    EpochFinished(EpochRecord),
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub step: usize,
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub terms: LossTerms,
}

pub trait Observer {
    fn on_event(&mut self, event: &Event);
}

impl Observer for () {
    fn on_event(&mut self, _: &Event) {}
}

impl Observer for Vec<Event> {
    fn on_event(&mut self, event: &Event) {
        self.push(event.clone());
    }
}

/// Shared state of a training run: seeds, input pipeline, observer.
pub struct TrainContext<'o> {
    pub seeds: SeedStream,
    pub pipeline: DataPipeline,
    pub observer: &'o mut dyn Observer,
}

impl<'o> TrainContext<'o> {
    pub fn new(seed: u64, pipeline: DataPipeline, observer: &'o mut dyn Observer) -> Self {
        Self {
            seeds: SeedStream::new(seed),
            pipeline,
            observer,
        }
    }

    fn emit(&mut self, e: Event) {
        self.observer.on_event(&e);
    }
}

/// Packs `(step, stage, epoch, batch)` into one stream index.
fn batch_key(step: usize, stage: Stage, epoch: usize, batch: usize) -> u64 {
    let s = match stage {
        Stage::Base => 0,
        Stage::SelfDistill { generation } => 1 + generation as u64,
        Stage::Incremental => 0xff,
    };
    ((step as u64) << 52) ^ (s << 44) ^ ((epoch as u64) << 24) ^ batch as u64
}

/// Stacks, augments and (with mixup) blends one mini-batch.
fn build_batch(
    items: &[(&[f64], usize)],
    shape: &[usize],
    regularizer: Regularizer,
    ctx: &TrainContext<'_>,
    purpose: &str,
    key: u64,
) -> Result<(Tensor, Vec<Target>)> {
    let width: usize = shape.iter().product();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(items.len());
    if ctx.pipeline.is_identity() {
        rows.extend(items.iter().map(|(x, _)| x.to_vec()));
    } else {
        let mut rng = ctx.seeds.rng(purpose, key);
        for (x, _) in items {
            rows.push(ctx.pipeline.apply(x, shape, &mut rng)?);
        }
    }
    let mut targets: Vec<Target> = items.iter().map(|&(_, y)| Target::hard(y)).collect();
    if let Regularizer::Mixup { alpha } = regularizer {
        let mut rng = ctx.seeds.rng("mixup", key ^ fnv_tag(purpose));
        let gamma = mix_coefficient(alpha, &mut rng)?;
        let mut partner: Vec<usize> = (0..items.len()).collect();
        shuffle(&mut rng, &mut partner);
        let (orig_rows, orig_t) = (rows.clone(), targets.clone());
        for i in 0..items.len() {
            let j = partner[i];
            for (v, w) in rows[i].iter_mut().zip(&orig_rows[j]) {
                *v = gamma * *v + (1.0 - gamma) * w;
            }
            targets[i] = Target::mix(&orig_t[i], &orig_t[j], gamma);
        }
    }
    let mut data = Vec::with_capacity(items.len() * width);
    for r in rows {
        data.extend_from_slice(&r);
    }
    let mut full = vec![items.len()];
    full.extend_from_slice(shape);
    Ok((Tensor::from_vec(&full, data)?, targets))
}

fn fnv_tag(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Distillation over `range` of the student's logits against the teacher's
/// logits over the same range.
fn kd_over(student: &Tensor, teacher: &Tensor, range: Range<usize>, temperature: f64) -> Result<BatchLoss> {
    let n = student.rows();
    let mut grad = Tensor::zeros(student.shape());
    if range.is_empty() || n == 0 {
        return Ok(BatchLoss { loss: 0.0, grad });
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let (l, g) = kd_loss_with_grad(&student.row(i)[range.clone()], &teacher.row(i)[range.clone()], temperature)?;
        total += l;
        for (d, s) in grad.row_mut(i)[range.clone()].iter_mut().zip(g) {
            *d = s * inv;
        }
    }
    Ok(BatchLoss {
        loss: total * inv,
        grad,
    })
}

fn combine(mut a: Tensor, b: &Tensor, weight: f64) -> Tensor {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += weight * y;
    }
    a
}

fn check_finite(loss: f64, step: usize, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, epoch, loss })
    }
}

#[derive(Default)]
struct EpochAccumulator {
    loss: f64,
    terms: LossTerms,
    batches: usize,
}

impl EpochAccumulator {
    fn add(&mut self, loss: f64, terms: LossTerms) {
        self.loss += loss;
        self.terms.ce_new += terms.ce_new;
        self.terms.ce_exemplar += terms.ce_exemplar;
        self.terms.kd_new += terms.kd_new;
        self.terms.kd_exemplar += terms.kd_exemplar;
        self.batches += 1;
    }

    fn finish(self, step: usize, stage: Stage, epoch: usize, lr: f64) -> EpochRecord {
        let n = self.batches.max(1) as f64;
        EpochRecord {
            step,
            stage,
            epoch,
            lr,
            loss: self.loss / n,
            terms: LossTerms {
                ce_new: self.terms.ce_new / n,
                ce_exemplar: self.terms.ce_exemplar / n,
                kd_new: self.terms.kd_new / n,
                kd_exemplar: self.terms.kd_exemplar / n,
            },
        }
    }
}

/// Outcome of a training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub epochs: Vec<EpochRecord>,
    pub updates: usize,
    pub lambda: f64,
}

impl StageSummary {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Plain classification on the step-0 classes, optionally distilled from a
/// same-architecture teacher (self-distillation).
fn supervised_epochs(
    model: &mut IncrementalClassifier,
    view: &TaskView<'_>,
    config: &TrainConfig,
    ctx: &mut TrainContext<'_>,
    stage: Stage,
    epochs: usize,
    schedule: &LrSchedule,
    teacher: Option<(&ModelSnapshot, f64, f64)>,
    mut on_epoch: impl FnMut(usize, &IncrementalClassifier),
) -> Result<StageSummary> {
    if view.is_empty() {
        return Err(Error::InvalidArgument(format!("step {} has no training data", view.step)));
    }
    if model.spans() != view.spans {
        return Err(Error::Contract(format!(
            "model spans {:?} do not match the step's {:?}",
            model.spans(),
            view.spans
        )));
    }
    let step = view.step;
    ctx.emit(Event::TrainingStarted { step, stage });
    let all = view.spans.all();
    let smoothing = config.regularizer.smoothing();
    let mut opt = Sgd::new(config.sgd);
    let mut order: Vec<usize> = (0..view.len()).collect();
    let mut summary = StageSummary {
        epochs: Vec::new(),
        updates: 0,
        lambda: teacher.map_or(0.0, |t| t.1),
    };
    for epoch in 0..epochs {
        let lr = schedule.lr(epoch, epochs);
        let mut rng = ctx.seeds.rng("x-order", batch_key(step, stage, epoch, 0));
        shuffle(&mut rng, &mut order);
        let mut acc = EpochAccumulator::default();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let items: Vec<(&[f64], usize)> = chunk.iter().map(|&j| (view.input(j), view.target(j))).collect();
            let key = batch_key(step, stage, epoch, b);
            let (x, targets) = build_batch(&items, view.sample_shape(), config.regularizer, ctx, "augment-x", key)?;
            let teacher_logits = match teacher {
                Some((t, _, _)) => Some(t.logits(&x)?),
                None => None,
            };
            model.zero_grad();
            let logits = model.forward_train(x)?;
            let ce = batch_cross_entropy(&logits, all.clone(), &targets, smoothing)?;
            let mut terms = LossTerms {
                ce_new: ce.loss,
                ..LossTerms::default()
            };
            let (loss, grad) = match (teacher, teacher_logits) {
                (Some((_, w, temp)), Some(tl)) => {
                    let kd = kd_over(&logits, &tl, all.clone(), temp)?;
                    terms.kd_new = kd.loss;
                    (ce.loss + w * kd.loss, combine(ce.grad, &kd.grad, w))
                }
                _ => (ce.loss, ce.grad),
            };
            check_finite(loss, step, epoch)?;
            model.backward(&grad);
            opt.step(lr, |f| model.visit_params_mut(f))?;
            summary.updates += 1;
            acc.add(loss, terms);
        }
        model.clear_cache();
        let rec = acc.finish(step, stage, epoch, lr);
        ctx.emit(Event::EpochFinished(rec));
        summary.epochs.push(rec);
        on_epoch(epoch, model);
    }
    Ok(summary)
}

/// Result of base training: the summary and any periodic checkpoints,
/// keyed by the number of completed epochs.
#[derive(Debug, Clone)]
pub struct BaseTraining {
    pub summary: StageSummary,
    pub checkpoints: Vec<(usize, ModelSnapshot)>,
}

/// Cross-entropy training on the base task.
pub fn train_base_task(
    model: &mut IncrementalClassifier,
    view: &TaskView<'_>,
    config: &TrainConfig,
    ctx: &mut TrainContext<'_>,
) -> Result<BaseTraining> {
    config.validate()?;
    if view.step != 0 {
        return Err(Error::Contract(format!("base training on step {}", view.step)));
    }
    let mut checkpoints = Vec::new();
    let every = config.snapshot_every;
    let summary = supervised_epochs(
        model,
        view,
        config,
        ctx,
        Stage::Base,
        config.epochs_base,
        &config.base_schedule,
        None,
        |epoch, m| {
            if let Some(k) = every {
                if (epoch + 1) % k == 0 {
                    checkpoints.push((epoch + 1, m.snapshot()));
                }
            }
        },
    )?;
    Ok(BaseTraining { summary, checkpoints })
}

/// Generations of self-distillation on the base task: each generation
/// freezes the current model as teacher and keeps training the student on
/// classification plus distillation.
pub fn run_self_distillation(
    model: &mut IncrementalClassifier,
    view: &TaskView<'_>,
    config: &TrainConfig,
    ctx: &mut TrainContext<'_>,
) -> Result<Vec<StageSummary>> {
    config.validate()?;
    let sd = &config.self_distill;
    let mut out = Vec::with_capacity(sd.generations);
    for generation in 0..sd.generations {
        let teacher = model.snapshot();
        ctx.emit(Event::SnapshotTaken {
            step: view.step,
            fingerprint: teacher.fingerprint(),
        });
        out.push(supervised_epochs(
            model,
            view,
            config,
            ctx,
            Stage::SelfDistill { generation },
            sd.epochs_per_generation,
            &sd.schedule,
            Some((&teacher, sd.kd_weight, sd.temperature)),
            |_, _| {},
        )?);
    }
    Ok(out)
}

/// One incremental step: new-class batches under the configured softmax,
/// exemplar batches under the combined softmax, distillation on both
/// against `teacher`, one optimizer update per batch pair.
///
/// `model` must already carry the step's output nodes, `teacher` must be the
/// pre-step model, and `memory` must already hold the step's new classes.
pub fn incremental_step(
    model: &mut IncrementalClassifier,
    teacher: &ModelSnapshot,
    memory: &ExemplarMemory,
    view: &TaskView<'_>,
    config: &TrainConfig,
    ctx: &mut TrainContext<'_>,
) -> Result<StageSummary> {
    config.validate()?;
    let spans = view.spans;
    let step = view.step;
    if step == 0 {
        return Err(Error::Contract("incremental step called on the base task".into()));
    }
    if model.spans() != spans {
        return Err(Error::Contract(format!(
            "model spans {:?} do not match the step's {:?}; expand the head first",
            model.spans(),
            spans
        )));
    }
    if teacher.num_classes() != spans.num_old() {
        return Err(Error::Contract(format!(
            "teacher has {} outputs, step has {} old classes",
            teacher.num_classes(),
            spans.num_old()
        )));
    }
    if memory.capacity() > 0 {
        if let Some(c) = view.new_class_ids.iter().find(|&&c| !memory.contains_class(c)) {
            return Err(Error::Contract(format!(
                "exemplar memory lacks new class {c}; update it before training"
            )));
        }
    }
    if view.is_empty() {
        return Err(Error::InvalidArgument(format!("step {step} has no training data")));
    }
    let lambda = config.lambda(spans)?;
    let use_kd = config.kd_enabled && lambda > 0.0;
    let smoothing = config.regularizer.smoothing();
    let schedule = config.step_schedule().clone();
    let epochs = config.epochs_incremental;
    let stage = Stage::Incremental;
    ctx.emit(Event::TrainingStarted { step, stage });

    let mut sampler = ExemplarSampler::new(memory, config.batch_size, ctx.seeds.seed("exemplar-batches", step as u64))?;
    let mut opt = Sgd::new(config.sgd);
    let mut order: Vec<usize> = (0..view.len()).collect();
    let mut summary = StageSummary {
        epochs: Vec::new(),
        updates: 0,
        lambda,
    };
    for epoch in 0..epochs {
        let lr = schedule.lr(epoch, epochs);
        let mut rng = ctx.seeds.rng("x-order", batch_key(step, stage, epoch, 0));
        shuffle(&mut rng, &mut order);
        let mut acc = EpochAccumulator::default();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let key = batch_key(step, stage, epoch, b);
            let mut terms = LossTerms::default();
            model.zero_grad();

            let items: Vec<(&[f64], usize)> = chunk.iter().map(|&j| (view.input(j), view.target(j))).collect();
            let (x, targets) = build_batch(&items, view.sample_shape(), config.regularizer, ctx, "augment-x", key)?;
            let frozen = if use_kd { Some(teacher.logits(&x)?) } else { None };
            let logits = model.forward_train(x)?;
            let ce = batch_new_class_ce(&logits, spans, &targets, config.softmax_mode, smoothing)?;
            terms.ce_new = ce.loss;
            let grad = match &frozen {
                Some(t) => {
                    let kd = kd_over(&logits, t, spans.old(), config.temperature)?;
                    terms.kd_new = kd.loss;
                    combine(ce.grad, &kd.grad, lambda)
                }
                None => ce.grad,
            };
            model.backward(&grad);

            if let Some(batch) = sampler.next_batch() {
                let items: Vec<(&[f64], usize)> = batch.iter().map(|e: &&Exemplar| (e.input.as_slice(), e.position)).collect();
                let (xp, tp) = build_batch(&items, memory.sample_shape(), config.regularizer, ctx, "augment-p", key)?;
                let frozen = if use_kd { Some(teacher.logits(&xp)?) } else { None };
                let logits = model.forward_train(xp)?;
                let ce = batch_cross_entropy(&logits, spans.all(), &tp, smoothing)?;
                terms.ce_exemplar = ce.loss;
                let grad = match &frozen {
                    Some(t) => {
                        let kd = kd_over(&logits, t, spans.old(), config.temperature)?;
                        terms.kd_exemplar = kd.loss;
                        combine(ce.grad, &kd.grad, lambda)
                    }
                    None => ce.grad,
                };
                model.backward(&grad);
            }

            let loss = terms.total(lambda);
            check_finite(loss, step, epoch)?;
            opt.step(lr, |f| model.visit_params_mut(f))?;
            summary.updates += 1;
            acc.add(loss, terms);
        }
        model.clear_cache();
        let rec = acc.finish(step, stage, epoch, lr);
        ctx.emit(Event::EpochFinished(rec));
        summary.epochs.push(rec);
    }
    Ok(summary)
}

/// Evaluation-mode scores over all current outputs.
///
/// With [`ClassifierKind::Nme`] the score of class `k` is the negative
/// distance between the normalized feature and the normalized mean of the
/// class's normalized exemplar features.
pub fn predict_scores(
    model: &IncrementalClassifier,
    x: &Tensor,
    kind: ClassifierKind,
    class_means: Option<&[Vec<f64>]>,
) -> Result<Tensor> {
    match kind {
        ClassifierKind::Cnn => model.logits(x),
        ClassifierKind::Nme => {
            let means = class_means.ok_or_else(|| Error::Contract("NME evaluation needs exemplar means".into()))?;
            let f = model.features(x)?;
            let mut out = Tensor::zeros(&[f.rows(), means.len()]);
            for i in 0..f.rows() {
                let u = unit_vector(f.row(i));
                for (k, m) in means.iter().enumerate() {
                    out.row_mut(i)[k] = -l2_distance(&u, m);
                }
            }
            Ok(out)
        }
    }
}

fn unit_vector(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v).max(1e-12);
    v.iter().map(|x| x / n).collect()
}

/// Normalized exemplar means, indexed by output position `0..num_outputs`.
pub fn exemplar_means<F: FeatureMap + ?Sized>(
    extractor: &F,
    memory: &ExemplarMemory,
    num_outputs: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; num_outputs];
    for (class, set) in memory.sets() {
        if set.is_empty() {
            return Err(Error::EmptyClass(class));
        }
        let refs: Vec<&Exemplar> = set.iter().collect();
        let f = extractor.features(&memory.batch(&refs))?;
        let pos = set[0].position;
        if pos >= num_outputs {
            continue;
        }
        let mut s = vec![0.0; f.row_len()];
        for r in 0..f.rows() {
            for (a, b) in s.iter_mut().zip(unit_vector(f.row(r))) {
                *a += b;
            }
        }
        sums[pos] = Some((s, f.rows()));
    }
    sums.into_iter()
        .enumerate()
        .map(|(k, s)| {
            let (s, n) = s.ok_or_else(|| Error::Contract(format!("no exemplars for output {k}")))?;
            Ok(unit_vector(&s.iter().map(|v| v / n as f64).collect::<Vec<_>>()))
        })
        .collect()
}

/// Percentage of `view` predicted correctly (argmax over all outputs).
pub fn view_accuracy(model: &IncrementalClassifier, view: &TaskView<'_>) -> Result<f64> {
    if view.is_empty() {
        return Err(Error::InvalidArgument("empty view".into()));
    }
    let idx: Vec<usize> = (0..view.len()).collect();
    let mut hits = 0;
    for chunk in idx.chunks(256) {
        let logits = model.logits(&view.batch(chunk))?;
        for (r, &j) in chunk.iter().enumerate() {
            hits += (argmax(logits.row(r)) == view.target(j)) as usize;
        }
    }
    Ok(100.0 * hits as f64 / view.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{exemplars_per_class, update_exemplar_sets, NewClassData};
    use crate::model::HeadMode;
    use crate::nn::ExtractorSpec;
    use crate::protocol::{ClassTaskSchedule, Dataset};
    use crate::rng::{normal, seeded};
    use approx::assert_relative_eq;

    /// Two Gaussian clusters per class in 2-d, well separated.
    fn blobs(classes: usize, per: usize, seed: u64) -> Dataset {
        let mut rng = seeded(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for c in 0..classes {
            for k in 0..per {
                let angle = (2 * c + k % 2) as f64 * core::f64::consts::PI / classes as f64;
                x.push(4.0 * libm::cos(angle) + 0.1 * normal(&mut rng));
                x.push(4.0 * libm::sin(angle) + 0.1 * normal(&mut rng));
                y.push(c as u32);
            }
        }
        Dataset::new(vec![2], x, y, None, classes).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs_base: 40,
            epochs_incremental: 10,
            batch_size: 16,
            base_schedule: LrSchedule::Cosine { start: 0.1, end: 1e-3 },
            incremental_schedule: LrSchedule::Cosine { start: 0.01, end: 1e-4 },
            sgd: SgdConfig {
                momentum: 0.9,
                weight_decay: 0.0,
            },
            ..TrainConfig::default()
        }
    }

    fn model_for(classes: usize, seed: u64) -> IncrementalClassifier {
        IncrementalClassifier::new(
            &ExtractorSpec::mlp(vec![16]),
            &[2],
            HeadMode::Dot,
            classes,
            1.0,
            &mut seeded(seed),
        )
        .unwrap()
    }

    #[test]
    fn base_training_fits_separable_blobs() {
        let data = blobs(4, 40, 1);
        let sched = ClassTaskSchedule::build(4, 4, 0, 3).unwrap();
        let view = sched.task_view(0, &data).unwrap();
        let mut model = model_for(4, 2);
        let mut sink = ();
        let mut ctx = TrainContext::new(5, DataPipeline::identity(1), &mut sink);
        train_base_task(&mut model, &view, &small_config(), &mut ctx).unwrap();
        assert_eq!(view_accuracy(&model, &view).unwrap(), 100.0);
    }

    #[test]
    fn base_training_is_deterministic_and_checkpoints() {
        let data = blobs(3, 20, 1);
        let sched = ClassTaskSchedule::build(3, 3, 0, 3).unwrap();
        let view = sched.task_view(0, &data).unwrap();
        let cfg = TrainConfig {
            epochs_base: 6,
            snapshot_every: Some(2),
            ..small_config()
        };
        let run = || {
            let mut m = model_for(3, 2);
            let mut sink = ();
            let mut ctx = TrainContext::new(5, DataPipeline::identity(1), &mut sink);
            let out = train_base_task(&mut m, &view, &cfg, &mut ctx).unwrap();
            (m.fingerprint(), out.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>())
        };
        let (a, ca) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert_eq!(ca, vec![2, 4, 6]);
    }

    #[test]
    fn zero_generations_is_identity() {
        let data = blobs(3, 10, 1);
        let sched = ClassTaskSchedule::build(3, 3, 0, 3).unwrap();
        let view = sched.task_view(0, &data).unwrap();
        let mut m = model_for(3, 2);
        let before = m.fingerprint();
        let cfg = TrainConfig {
            self_distill: SelfDistillConfig {
                generations: 0,
                ..SelfDistillConfig::default()
            },
            ..small_config()
        };
        let mut sink = ();
        let mut ctx = TrainContext::new(5, DataPipeline::identity(1), &mut sink);
        assert!(run_self_distillation(&mut m, &view, &cfg, &mut ctx).unwrap().is_empty());
        assert_eq!(m.fingerprint(), before);
    }

    #[test]
    fn self_distillation_teacher_is_previous_student() {
        let data = blobs(3, 10, 1);
        let sched = ClassTaskSchedule::build(3, 3, 0, 3).unwrap();
        let view = sched.task_view(0, &data).unwrap();
        let mut m = model_for(3, 2);
        let cfg = TrainConfig {
            self_distill: SelfDistillConfig {
                generations: 2,
                epochs_per_generation: 2,
                ..SelfDistillConfig::default()
            },
            ..small_config()
        };
        let start = m.fingerprint();
        let mut events: Vec<Event> = Vec::new();
        let mut ctx = TrainContext::new(5, DataPipeline::identity(1), &mut events);
        run_self_distillation(&mut m, &view, &cfg, &mut ctx).unwrap();
        let teachers: Vec<u64> = events
            .iter()
            .filter_map(|e| match e {
                Event::SnapshotTaken { fingerprint, .. } => Some(*fingerprint),
                _ => None,
            })
            .collect();
        assert_eq!(teachers.len(), 2);
        assert_eq!(teachers[0], start);
        assert_ne!(teachers[1], start);
    }

    struct Setup {
        data: Dataset,
        sched: ClassTaskSchedule,
    }

    fn setup() -> Setup {
        Setup {
            data: blobs(4, 20, 7),
            sched: ClassTaskSchedule::build(4, 2, 1, 9).unwrap(),
        }
    }

    fn prepared(s: &Setup) -> (IncrementalClassifier, ModelSnapshot, ExemplarMemory) {
        let mut m = model_for(2, 3);
        let v0 = s.sched.task_view(0, &s.data).unwrap();
        let mut sink = ();
        let mut ctx = TrainContext::new(5, DataPipeline::identity(1), &mut sink);
        train_base_task(&mut m, &v0, &TrainConfig { epochs_base: 5, ..small_config() }, &mut ctx).unwrap();
        let mut mem = ExemplarMemory::new(8, vec![2]);
        update_exemplar_sets(&mut mem, &NewClassData::from_view(&v0), 4, &m, 1, false).unwrap();
        let teacher = m.snapshot();
        let v1 = s.sched.task_view(1, &s.data).unwrap();
        update_exemplar_sets(&mut mem, &NewClassData::from_view(&v1), exemplars_per_class(8, 4).unwrap(), &teacher, 2, false)
            .unwrap();
        m.expand_head(2, &mut seeded(4)).unwrap();
        (m, teacher, mem)
    }

    #[test]
    fn incremental_step_requires_memory_update_first() {
        let s = setup();
        let (mut m, teacher, _) = prepared(&s);
        let v1 = s.sched.task_view(1, &s.data).unwrap();
        let mut stale = ExemplarMemory::new(8, vec![2]);
        let v0 = s.sched.task_view(0, &s.data).unwrap();
        update_exemplar_sets(&mut stale, &NewClassData::from_view(&v0), 4, &teacher, 1, false).unwrap();
        let mut sink = ();
        let mut ctx = TrainContext::new(5, DataPipeline::identity(1), &mut sink);
        let err = incremental_step(&mut m, &teacher, &stale, &v1, &small_config(), &mut ctx).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn incremental_step_checks_spans() {
        let s = setup();
        let (m, teacher, mem) = prepared(&s);
        let v1 = s.sched.task_view(1, &s.data).unwrap();
        let mut unexpanded = teacher.thaw();
        let mut sink = ();
        let mut ctx = TrainContext::new(5, DataPipeline::identity(1), &mut sink);
        assert!(incremental_step(&mut unexpanded, &teacher, &mem, &v1, &small_config(), &mut ctx).is_err());
        let wrong_teacher = m.snapshot();
        let mut m2 = m.clone();
        assert!(incremental_step(&mut m2, &wrong_teacher, &mem, &v1, &small_config(), &mut ctx).is_err());
    }

    #[test]
    fn every_new_batch_is_paired_with_an_exemplar_batch() {
        let s = setup();
        let (mut m, teacher, mem) = prepared(&s);
        let v1 = s.sched.task_view(1, &s.data).unwrap();
        let cfg = TrainConfig {
            epochs_incremental: 3,
            batch_size: 5,
            ..small_config()
        };
        let mut sink = ();
        let mut ctx = TrainContext::new(5, DataPipeline::identity(1), &mut sink);
        let out = incremental_step(&mut m, &teacher, &mem, &v1, &cfg, &mut ctx).unwrap();
        // 40 new samples / 5 = 8 updates per epoch; 8 exemplars cycle in 2 batches.
        assert_eq!(out.updates, 24);
        for e in &out.epochs {
            assert!(e.terms.ce_exemplar > 0.0);
        }
        assert_relative_eq!(out.lambda, 5.0 * libm::pow(2.0, 2.0 / 3.0), epsilon = 1e-12);
    }

    #[test]
    fn strong_distillation_keeps_old_outputs_close_to_teacher() {
        let s = setup();
        let (m, teacher, mem) = prepared(&s);
        let v1 = s.sched.task_view(1, &s.data).unwrap();
        let x = v1.batch(&(0..v1.len()).collect::<Vec<_>>());
        let t = teacher.logits(&x).unwrap();
        let drift = |kd_enabled: bool| {
            let cfg = TrainConfig {
                epochs_incremental: 5,
                kd_enabled,
                lambda_base: 5.0,
                adaptive_weighting: false,
                ..small_config()
            };
            let mut student = m.clone();
            let mut sink = ();
            let mut ctx = TrainContext::new(5, DataPipeline::identity(1), &mut sink);
            let out = incremental_step(&mut student, &teacher, &mem, &v1, &cfg, &mut ctx).unwrap();
            if kd_enabled {
                // Student starts as an expanded copy of the teacher.
                assert!(out.epochs[0].terms.kd_new < 1e-2);
            }
            let l = student.logits(&x).unwrap();
            kd_over(&l, &Tensor::from_vec(l.shape(), {
                let mut full = l.data().to_vec();
                for i in 0..l.rows() {
                    full[i * 4..i * 4 + 2].copy_from_slice(t.row(i));
                }
                full
            }).unwrap(), 0..2, 1.0).unwrap().loss
        };
        let (a, b) = (drift(true), drift(false));
        assert!(a < b, "{a} vs {b}");
    }

    #[test]
    fn low_lr_validation() {
        let bad = TrainConfig {
            incremental_schedule: LrSchedule::Cosine { start: 1.0, end: 0.0 },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { low_lr: false, ..bad }.validate().is_ok());
        TrainConfig::imagenet().validate().unwrap();
        TrainConfig::imagenet_subset().validate().unwrap();
    }

    #[test]
    fn lambda_for_cifar_first_step() {
        let cfg = TrainConfig::default();
        let l = cfg.lambda(Spans::new(50, 60).unwrap()).unwrap();
        assert_relative_eq!(l, 16.510, epsilon = 1e-3);
        assert_eq!(TrainConfig { kd_enabled: false, ..cfg }.lambda(Spans::new(50, 60).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn nme_scores_prefer_nearest_mean() {
        let s = setup();
        let (m, _, mem) = prepared(&s);
        let means = exemplar_means(&m, &mem, 4).unwrap();
        assert_eq!(means.len(), 4);
        let x = s.sched.task_view(1, &s.data).unwrap().batch(&[0]);
        let scores = predict_scores(&m, &x, ClassifierKind::Nme, Some(&means)).unwrap();
        assert_eq!(scores.shape(), &[1, 4]);
        assert!(predict_scores(&m, &x, ClassifierKind::Nme, None).is_err());
    }
}
