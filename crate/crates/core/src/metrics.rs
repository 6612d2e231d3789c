//! Evaluation quantities: accuracy matrix, average incremental accuracy,
//! forgetting, feature retention, secondary-information metrics, calibration
//! and class-mean geometry.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{batch_cross_entropy, log_softmax, softmax, Target};
use crate::model::{ClassifierHead, FeatureMap, HeadMode};
use crate::optim::{LrSchedule, Sgd, SgdConfig};
use crate::protocol::{ClassId, Dataset};
use crate::rng::{seeded, shuffle};
use crate::tensor::{l2_distance, Tensor};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Percentage of rows whose argmax equals the target.
pub fn accuracy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::Shape {
            expected: format!("{} targets", logits.rows()),
            actual: format!("{}", targets.len()),
        });
    }
    let hits = targets.iter().enumerate().filter(|(i, &t)| argmax(logits.row(*i)) == t).count();
    Ok(100.0 * hits as f64 / targets.len() as f64)
}

/// Per-step, per-task accuracies plus the overall accuracy of each step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
    overall: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends step `i`: `per_task` must hold `i + 1` entries.
    pub fn push_step(&mut self, per_task: Vec<f64>, overall: f64) -> Result<()> {
        let step = self.rows.len();
        if per_task.len() != step + 1 {
            return Err(Error::Shape {
                expected: format!("{} task accuracies at step {step}", step + 1),
                actual: format!("{}", per_task.len()),
            });
        }
        if per_task.iter().chain([&overall]).any(|a| !(0.0..=100.0).contains(a)) {
            return Err(Error::InvalidArgument("accuracy outside [0, 100]".into()));
        }
        self.rows.push(per_task);
        self.overall.push(overall);
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.rows.len()
    }

    /// Accuracy on task `task` after step `step`, defined iff `task <= step`.
    pub fn entry(&self, step: usize, task: usize) -> Option<f64> {
        self.rows.get(step).and_then(|r| r.get(task)).copied()
    }

    pub fn row(&self, step: usize) -> Option<&[f64]> {
        self.rows.get(step).map(Vec::as_slice)
    }

    pub fn overall(&self) -> &[f64] {
        &self.overall
    }

    /// Mean of the per-step overall accuracies; `expected_steps` guards
    /// against averaging a truncated run.
    pub fn average_incremental_accuracy(&self, expected_steps: usize) -> Result<f64> {
        if self.overall.len() != expected_steps || expected_steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "accuracy matrix has {} of {expected_steps} steps",
                self.overall.len()
            )));
        }
        Ok(self.overall.iter().sum::<f64>() / expected_steps as f64)
    }

    /// First-task accuracy drop between the first and last recorded steps.
    pub fn first_task_forgetting(&self) -> Option<f64> {
        Some(forgetting_rate(self.entry(0, 0)?, self.rows.last()?[0]))
    }
}

pub fn forgetting_rate(initial: f64, final_: f64) -> f64 {
    initial - final_
}

/// Per-task accuracy and overall accuracy of predictions over output
/// positions, where `task_of(position)` names the owning task.
pub fn task_accuracies(
    logits: &Tensor,
    targets: &[usize],
    num_tasks: usize,
    task_of: impl Fn(usize) -> usize,
) -> Result<(Vec<f64>, f64)> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::Shape {
            expected: format!("{} targets", logits.rows()),
            actual: format!("{}", targets.len()),
        });
    }
    let mut hits = vec![0usize; num_tasks];
    let mut counts = vec![0usize; num_tasks];
    for (i, &t) in targets.iter().enumerate() {
        let task = task_of(t);
        if task >= num_tasks {
            return Err(Error::InvalidArgument(format!("target {t} belongs to unseen task {task}")));
        }
        counts[task] += 1;
        if argmax(logits.row(i)) == t {
            hits[task] += 1;
        }
    }
    let per_task = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { 100.0 * h as f64 / c as f64 })
        .collect();
    let overall = 100.0 * hits.iter().sum::<usize>() as f64 / targets.len() as f64;
    Ok((per_task, overall))
}

fn check_superclasses(logits: &[f64], label: usize, superclass: &[ClassId]) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument("secondary metrics need at least 2 logits".into()));
    }
    if superclass.len() != logits.len() || label >= logits.len() {
        return Err(Error::Shape {
            expected: format!("superclass map and label over {} logits", logits.len()),
            actual: format!("map of {} and label {label}", superclass.len()),
        });
    }
    Ok(())
}

/// Softmax over the logits with the single largest (lowest index on ties)
/// removed; returns `(removed index, probabilities for the remaining
/// indices in order)`.
pub fn secondary_softmax(logits: &[f64]) -> (usize, Vec<(usize, f64)>) {
    let top = argmax(logits);
    let rest: Vec<usize> = (0..logits.len()).filter(|&i| i != top).collect();
    let vals: Vec<f64> = rest.iter().map(|&i| logits[i]).collect();
    (top, rest.into_iter().zip(softmax(&vals)).collect())
}

/// Negative log of the secondary-softmax mass inside the true superclass.
pub fn ss_nll(logits: &[f64], label: usize, superclass: &[ClassId]) -> Result<f64> {
    check_superclasses(logits, label, superclass)?;
    let top = argmax(logits);
    let target = superclass[label];
    let rest: Vec<usize> = (0..logits.len()).filter(|&i| i != top).collect();
    let vals: Vec<f64> = rest.iter().map(|&i| logits[i]).collect();
    let ls = log_softmax(&vals);
    let inside: Vec<f64> = rest
        .iter()
        .zip(&ls)
        .filter(|(i, _)| superclass[**i] == target)
        .map(|(_, l)| *l)
        .collect();
    if inside.is_empty() {
        return Ok(f64::INFINITY);
    }
    let m = inside.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + libm::log(inside.iter().map(|l| libm::exp(l - m)).sum::<f64>());
    Ok((-lse).max(0.0))
}

/// Whether the largest secondary logit falls in the true superclass.
pub fn ss_acc(logits: &[f64], label: usize, superclass: &[ClassId]) -> Result<bool> {
    check_superclasses(logits, label, superclass)?;
    let top = argmax(logits);
    let mut best: Option<usize> = None;
    for i in (0..logits.len()).filter(|&i| i != top) {
        if best.map_or(true, |b| logits[i] > logits[b]) {
            best = Some(i);
        }
    }
    Ok(superclass[best.expect("at least two logits")] == superclass[label])
}

/// Batch secondary-information metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondaryScores {
    /// Mean SS-NLL over the scored samples.
    pub ss_nll: f64,
    /// Percent of scored samples whose secondary argmax hits the true superclass.
    pub ss_acc: f64,
    pub scored: usize,
    /// Samples whose superclass has no other class among the logits; their
    /// secondary mass inside the superclass is zero by construction.
    pub skipped: usize,
}

/// SS-NLL and SS-Acc over a batch. Samples whose true superclass is
/// represented by a single output are skipped.
pub fn secondary_metrics(logits: &Tensor, labels: &[usize], superclass: &[ClassId]) -> Result<SecondaryScores> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape {
            expected: format!("{} labels", logits.rows()),
            actual: format!("{}", labels.len()),
        });
    }
    let mut nll = 0.0;
    let mut hits = 0usize;
    let mut scored = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        check_superclasses(logits.row(i), y, superclass)?;
        if superclass.iter().filter(|&&s| s == superclass[y]).count() < 2 {
            continue;
        }
        nll += ss_nll(logits.row(i), y, superclass)?;
        hits += ss_acc(logits.row(i), y, superclass)? as usize;
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::InvalidArgument(
            "no sample has a superclass with two or more outputs".into(),
        ));
    }
    let n = scored as f64;
    Ok(SecondaryScores {
        ss_nll: nll / n,
        ss_acc: 100.0 * hits as f64 / n,
        scored,
        skipped: labels.len() - scored,
    })
}

/// `(max softmax probability, prediction correct)` per row.
pub fn confidences(logits: &Tensor, labels: &[usize]) -> Vec<(f64, bool)> {
    (0..logits.rows())
        .map(|i| {
            let p = softmax(logits.row(i));
            let k = argmax(&p);
            (p[k], k == labels[i])
        })
        .collect()
}

pub const DEFAULT_ECE_BINS: usize = 15;

/// Binned expected calibration error. Bin `b` covers `(b/B, (b+1)/B]`;
/// confidence 0 falls in the first bin.
pub fn ece(pairs: &[(f64, bool)], num_bins: usize) -> Result<f64> {
    if num_bins == 0 {
        return Err(Error::InvalidArgument("ECE needs at least one bin".into()));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("ECE of an empty prediction set".into()));
    }
    let mut count = vec![0usize; num_bins];
    let mut conf = vec![0.0; num_bins];
    let mut hits = vec![0.0; num_bins];
    for &(c, ok) in pairs {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidArgument(format!("confidence {c} outside [0, 1]")));
        }
        let b = (libm::ceil(c * num_bins as f64) as usize).saturating_sub(1).min(num_bins - 1);
        count[b] += 1;
        conf[b] += c;
        hits[b] += ok as u8 as f64;
    }
    let n = pairs.len() as f64;
    Ok((0..num_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let k = count[b] as f64;
            (k / n) * libm::fabs(hits[b] / k - conf[b] / k)
        })
        .sum())
}

/// `|mean old-class norm - mean new-class norm|`.
pub fn weight_norm_gap(old_mean: f64, new_mean: f64) -> f64 {
    libm::fabs(old_mean - new_mean)
}

/// Mean feature vector of every class present in `dataset`.
pub fn class_means<F: FeatureMap + ?Sized>(extractor: &F, dataset: &Dataset, batch: usize) -> Result<Vec<Option<Vec<f64>>>> {
    let by_class = dataset.indices_by_class();
    let mut means = vec![None; dataset.num_classes()];
    for (c, idx) in by_class.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let mut sum: Vec<f64> = Vec::new();
        for chunk in idx.chunks(batch.max(1)) {
            let f = extractor.features(&dataset.batch(chunk))?;
            if sum.is_empty() {
                sum = vec![0.0; f.row_len()];
            }
            for r in 0..f.rows() {
                for (s, v) in sum.iter_mut().zip(f.row(r)) {
                    *s += v;
                }
            }
        }
        let n = idx.len() as f64;
        means[c] = Some(sum.into_iter().map(|s| s / n).collect());
    }
    Ok(means)
}

/// A class pair and whether it shares a superclass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPair {
    pub a: ClassId,
    pub b: ClassId,
    pub similar: bool,
}

/// All unordered class pairs, labeled by superclass membership.
pub fn class_pairs(superclass: &[ClassId]) -> Vec<ClassPair> {
    let mut out = Vec::new();
    for a in 0..superclass.len() {
        for b in a + 1..superclass.len() {
            out.push(ClassPair {
                a: a as ClassId,
                b: b as ClassId,
                similar: superclass[a] == superclass[b],
            });
        }
    }
    out
}

/// Per pair, class-mean distance under `model_a` divided by the distance
/// under the baseline `model_b`.
pub fn class_mean_distance_ratios<A, B>(
    model_a: &A,
    model_b: &B,
    pairs: &[ClassPair],
    dataset: &Dataset,
) -> Result<Vec<f64>>
where
    A: FeatureMap + ?Sized,
    B: FeatureMap + ?Sized,
{
    let ma = class_means(model_a, dataset, 256)?;
    let mb = class_means(model_b, dataset, 256)?;
    ratios_from_means(&ma, &mb, pairs)
}

pub fn ratios_from_means(ma: &[Option<Vec<f64>>], mb: &[Option<Vec<f64>>], pairs: &[ClassPair]) -> Result<Vec<f64>> {
    let get = |m: &[Option<Vec<f64>>], c: ClassId| -> Result<Vec<f64>> {
        m.get(c as usize).cloned().flatten().ok_or(Error::EmptyClass(c))
    };
    pairs
        .iter()
        .map(|p| {
            let da = l2_distance(&get(ma, p.a)?, &get(ma, p.b)?);
            let db = l2_distance(&get(mb, p.a)?, &get(mb, p.b)?);
            Ok(if da == db { 1.0 } else { da / db })
        })
        .collect()
}

/// Mean ratio over similar and dissimilar pairs.
pub fn mean_ratios(pairs: &[ClassPair], ratios: &[f64]) -> (Option<f64>, Option<f64>) {
    let mean = |similar: bool| {
        let v: Vec<f64> = pairs
            .iter()
            .zip(ratios)
            .filter(|(p, _)| p.similar == similar)
            .map(|(_, r)| *r)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    (mean(true), mean(false))
}

/// Linear-head retraining budget for the feature-retention probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub sgd: SgdConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            schedule: LrSchedule::Cosine { start: 0.1, end: 1e-4 },
            sgd: SgdConfig::default(),
        }
    }
}

fn extract_all<F: FeatureMap + ?Sized>(f: &F, ds: &Dataset) -> Result<Tensor> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut rows = Vec::new();
    let mut width = 0;
    for chunk in idx.chunks(256) {
        let t = f.features(&ds.batch(chunk))?;
        width = t.row_len();
        rows.extend_from_slice(t.data());
    }
    Tensor::from_vec(&[ds.len(), width], rows)
}

/// Test accuracy of a fresh linear head trained on frozen features.
pub fn linear_probe_accuracy<F: FeatureMap + ?Sized>(
    extractor: &F,
    train: &Dataset,
    test: &Dataset,
    config: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    config.schedule.validate()?;
    let ftrain = extract_all(extractor, train)?;
    let ftest = extract_all(extractor, test)?;
    let classes = train.num_classes();
    let mut rng = seeded(seed);
    let mut head = ClassifierHead::new(HeadMode::Dot, ftrain.row_len(), classes, 1.0, &mut rng);
    let mut opt = Sgd::new(config.sgd);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let width = ftrain.row_len();
    for epoch in 0..config.epochs {
        let lr = config.schedule.lr(epoch, config.epochs);
        shuffle(&mut rng, &mut order);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut x = Vec::with_capacity(chunk.len() * width);
            for &i in chunk {
                x.extend_from_slice(ftrain.row(i));
            }
            let x = Tensor::from_vec(&[chunk.len(), width], x)?;
            let targets: Vec<Target> = chunk.iter().map(|&i| Target::hard(train.fine(i) as usize)).collect();
            head.visit_params_mut(&mut |p| p.zero_grad());
            let logits = head.forward_train(x);
            let loss = batch_cross_entropy(&logits, 0..classes, &targets, 0.0)?;
            if !loss.loss.is_finite() {
                return Err(Error::Diverged {
                    step: 0,
                    epoch,
                    loss: loss.loss,
                });
            }
            head.backward(&loss.grad);
            opt.step(lr, |f| head.visit_params_mut(f))?;
        }
    }
    let labels: Vec<usize> = test.fine_labels().iter().map(|&c| c as usize).collect();
    accuracy(&head.infer(&ftest), &labels)
}

/// `joint_accuracy` minus the accuracy of a linear probe on the frozen
/// features of `extractor`.
pub fn feature_retention<F: FeatureMap + ?Sized>(
    extractor: &F,
    train: &Dataset,
    test: &Dataset,
    joint_accuracy: f64,
    config: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    Ok(joint_accuracy - linear_probe_accuracy(extractor, train, test, config, seed)?)
}

/// Final summary of one run. `None` marks metrics that were not computed
/// (for instance SS metrics without superclass labels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub avg_acc: f64,
    pub forgetting: f64,
    pub feature_retention: Option<f64>,
    pub ss_nll: Option<f64>,
    pub ss_acc: Option<f64>,
    pub ece: f64,
    pub weight_norm_gap: Option<f64>,
    /// Fingerprints of the checkpoints each metric was computed from.
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub first_model: u64,
    pub final_model: u64,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let opt = [self.feature_retention, self.ss_nll, self.ss_acc, self.weight_norm_gap];
        let finite = [self.avg_acc, self.forgetting, self.ece].iter().all(|v| v.is_finite())
            && opt.iter().flatten().all(|v| v.is_finite());
        if !finite || !(0.0..=1.0).contains(&self.ece) {
            return Err(Error::Contract(format!("metrics report has non-finite or out-of-range values: {self:?}")));
        }
        Ok(())
    }
}
