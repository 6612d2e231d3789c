//! The compositional loss system.
//!
//! Classification on new-class batches normalizes over the new-class logits
//! only (separate softmax), classification on exemplar batches normalizes over
//! all logits (combined softmax), and distillation always compares old-class
//! distributions against the frozen pre-step model. Every batch-level term is
//! a mean over the batch, so the distillation weight does not depend on the
//! batch size.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Old/new partition of the output nodes at the current step: classes
/// `0..old` were learned before, `old..total` arrive with this task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spans {
    old: usize,
    total: usize,
}

impl Spans {
    pub fn new(num_old: usize, num_total: usize) -> Result<Self> {
        if num_old > num_total || num_total == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid spans: {num_old} old of {num_total} total"
            )));
        }
        Ok(Self {
            old: num_old,
            total: num_total,
        })
    }

    pub fn old(&self) -> Range<usize> {
        0..self.old
    }

    pub fn new_span(&self) -> Range<usize> {
        self.old..self.total
    }

    pub fn all(&self) -> Range<usize> {
        0..self.total
    }

    pub fn num_old(&self) -> usize {
        self.old
    }

    pub fn num_new(&self) -> usize {
        self.total - self.old
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// One logit vector annotated with its old/new spans.
#[derive(Debug, Clone, Copy)]
pub struct LogitsSplit<'a> {
    pub logits: &'a [f64],
    pub spans: Spans,
}

impl<'a> LogitsSplit<'a> {
    pub fn new(logits: &'a [f64], spans: Spans) -> Result<Self> {
        if logits.len() != spans.total() {
            return Err(Error::Shape {
                expected: format!("{} logits", spans.total()),
                actual: format!("{}", logits.len()),
            });
        }
        Ok(Self { logits, spans })
    }

    pub fn old_logits(&self) -> &'a [f64] {
        &self.logits[self.spans.old()]
    }

    pub fn new_logits(&self) -> &'a [f64] {
        &self.logits[self.spans.new_span()]
    }
}

/// Classification target as a sparse distribution over output indices.
///
/// Hard labels carry one entry of mass 1; mixup produces two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    entries: Vec<(usize, f64)>,
}

impl Target {
    pub fn hard(class: usize) -> Self {
        Self {
            entries: vec![(class, 1.0)],
        }
    }

    /// `gamma * a + (1 - gamma) * b`.
    pub fn mix(a: &Target, b: &Target, gamma: f64) -> Self {
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(a.entries.len() + b.entries.len());
        for &(k, w) in &a.entries {
            entries.push((k, gamma * w));
        }
        for &(k, w) in &b.entries {
            match entries.iter_mut().find(|(c, _)| *c == k) {
                Some(e) => e.1 += (1.0 - gamma) * w,
                None => entries.push((k, (1.0 - gamma) * w)),
            }
        }
        entries.retain(|&(_, w)| w != 0.0);
        Self { entries }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    /// Class with the largest mass (ties to the lowest index).
    pub fn argmax(&self) -> usize {
        let mut best = self.entries[0];
        for &e in &self.entries[1..] {
            if e.1 > best.1 || (e.1 == best.1 && e.0 < best.0) {
                best = e;
            }
        }
        best.0
    }

    /// Dense distribution over `len` classes.
    pub fn dense(&self, len: usize) -> Vec<f64> {
        let mut d = vec![0.0; len];
        for &(k, w) in &self.entries {
            d[k] += w;
        }
        d
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = xs.iter().map(|x| libm::exp(x - m)).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= s);
    e
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + libm::log(xs.iter().map(|x| libm::exp(x - m)).sum::<f64>());
    xs.iter().map(|x| x - lse).collect()
}

/// Cross-entropy of `target` under a softmax restricted to `span`.
///
/// Returns the loss and its gradient over the full logit vector (zero outside
/// `span`). `smoothing` blends the target with the uniform distribution over
/// the span.
pub fn span_cross_entropy(
    logits: &[f64],
    span: Range<usize>,
    target: &Target,
    smoothing: f64,
) -> Result<(f64, Vec<f64>)> {
    if span.is_empty() || span.end > logits.len() {
        return Err(Error::InvalidArgument(format!(
            "softmax span {span:?} invalid for {} logits",
            logits.len()
        )));
    }
    let width = span.len();
    let mut q = vec![smoothing / width as f64; width];
    for &(k, w) in target.entries() {
        if !span.contains(&k) {
            return Err(Error::Contract(format!(
                "target class {k} outside softmax span {span:?}"
            )));
        }
        q[k - span.start] += (1.0 - smoothing) * w;
    }
    let logp = log_softmax(&logits[span.clone()]);
    let loss = -q.iter().zip(&logp).map(|(q, l)| q * l).sum::<f64>();
    let mass: f64 = q.iter().sum();
    let mut grad = vec![0.0; logits.len()];
    for (i, (l, q)) in logp.iter().zip(&q).enumerate() {
        grad[span.start + i] = mass * libm::exp(*l) - q;
    }
    Ok((loss, grad))
}

/// Intra-task classification loss: softmax over the new-class logits only.
pub fn intra_task_ce(split: &LogitsSplit<'_>, label: usize) -> Result<f64> {
    if !split.spans.new_span().contains(&label) {
        return Err(Error::Contract(format!(
            "label {label} is not a new class (new span {:?})",
            split.spans.new_span()
        )));
    }
    span_cross_entropy(split.logits, split.spans.new_span(), &Target::hard(label), 0.0).map(|r| r.0)
}

/// Inter-task classification loss: softmax over every seen class.
pub fn inter_task_ce(split: &LogitsSplit<'_>, label: usize) -> Result<f64> {
    if label >= split.spans.total() {
        return Err(Error::Contract(format!(
            "label {label} is not a seen class ({} seen)",
            split.spans.total()
        )));
    }
    span_cross_entropy(split.logits, split.spans.all(), &Target::hard(label), 0.0).map(|r| r.0)
}

/// The combined-softmax baseline; the same formula as [`inter_task_ce`],
/// applied to new-class batches as well.
pub fn combined_softmax_ce(split: &LogitsSplit<'_>, label: usize) -> Result<f64> {
    inter_task_ce(split, label)
}

/// `KL(softmax(frozen / T) || softmax(current / T))` and its gradient with
/// respect to `current`. An empty old span contributes zero.
pub fn kd_loss_with_grad(current: &[f64], frozen: &[f64], temperature: f64) -> Result<(f64, Vec<f64>)> {
    if current.len() != frozen.len() {
        return Err(Error::Shape {
            expected: format!("{} old-class logits", frozen.len()),
            actual: format!("{}", current.len()),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    if current.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let scaled = |v: &[f64]| v.iter().map(|x| x / temperature).collect::<Vec<_>>();
    let log_p_teacher = log_softmax(&scaled(frozen));
    let log_p_student = log_softmax(&scaled(current));
    let mut loss = 0.0;
    let mut grad = vec![0.0; current.len()];
    for i in 0..current.len() {
        let pt = libm::exp(log_p_teacher[i]);
        loss += pt * (log_p_teacher[i] - log_p_student[i]);
        grad[i] = (libm::exp(log_p_student[i]) - pt) / temperature;
    }
    // Rounding can push an exact match a hair below zero.
    Ok((loss.max(0.0), grad))
}

pub fn kd_loss(current_old: &[f64], frozen_old: &[f64], temperature: f64) -> Result<f64> {
    kd_loss_with_grad(current_old, frozen_old, temperature).map(|r| r.0)
}

/// Distillation weight `base * ((C_n + C_o) / C_n)^(2/3)`.
pub fn adaptive_lambda(num_new: usize, num_old: usize, lambda_base: f64) -> Result<f64> {
    if num_new == 0 {
        return Err(Error::InvalidArgument("adaptive weighting needs at least one new class".into()));
    }
    if !(lambda_base > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda_base must be positive, got {lambda_base}")));
    }
    let ratio = (num_new + num_old) as f64 / num_new as f64;
    Ok(lambda_base * libm::pow(ratio, 2.0 / 3.0))
}

/// The four loss components of one update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce_new: f64,
    pub ce_exemplar: f64,
    pub kd_new: f64,
    pub kd_exemplar: f64,
}

impl LossTerms {
    /// `(CE_X + CE_P) + lambda * (KD_X + KD_P)`.
    pub fn total(&self, lambda: f64) -> f64 {
        (self.ce_new + self.ce_exemplar) + lambda * (self.kd_new + self.kd_exemplar)
    }
}

/// Which softmax the classification loss on new-class batches uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftmaxMode {
    /// Separate softmax over the new-class logits.
    #[default]
    Sep,
    /// One softmax over all logits.
    Comb,
}

/// Mean loss over a batch and the gradient with respect to its logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub grad: Tensor,
}

/// Mean classification loss over a batch of logits `[n, t]`, softmax
/// restricted to `span`.
pub fn batch_cross_entropy(
    logits: &Tensor,
    span: Range<usize>,
    targets: &[Target],
    smoothing: f64,
) -> Result<BatchLoss> {
    let n = logits.rows();
    if targets.len() != n || n == 0 {
        return Err(Error::Shape {
            expected: format!("{n} targets"),
            actual: format!("{}", targets.len()),
        });
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    let inv = 1.0 / n as f64;
    for (i, t) in targets.iter().enumerate() {
        let (l, g) = span_cross_entropy(logits.row(i), span.clone(), t, smoothing)?;
        total += l;
        for (d, s) in grad.row_mut(i).iter_mut().zip(g) {
            *d = s * inv;
        }
    }
    Ok(BatchLoss {
        loss: total * inv,
        grad,
    })
}

/// Classification loss on a new-class batch under `mode`.
pub fn batch_new_class_ce(
    logits: &Tensor,
    spans: Spans,
    targets: &[Target],
    mode: SoftmaxMode,
    smoothing: f64,
) -> Result<BatchLoss> {
    let span = match mode {
        SoftmaxMode::Sep => spans.new_span(),
        SoftmaxMode::Comb => spans.all(),
    };
    batch_cross_entropy(logits, span, targets, smoothing)
}

/// Mean distillation loss between the student's old-class logits and the
/// teacher's outputs `[n, num_old]`.
pub fn batch_kd(student: &Tensor, teacher: &Tensor, spans: Spans, temperature: f64) -> Result<BatchLoss> {
    let n = student.rows();
    if teacher.rows() != n || teacher.row_len() != spans.num_old() {
        return Err(Error::Shape {
            expected: format!("teacher logits [{n}, {}]", spans.num_old()),
            actual: format!("{:?}", teacher.shape()),
        });
    }
    let mut grad = Tensor::zeros(student.shape());
    if spans.num_old() == 0 || n == 0 {
        return Ok(BatchLoss { loss: 0.0, grad });
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let (l, g) = kd_loss_with_grad(&student.row(i)[spans.old()], teacher.row(i), temperature)?;
        total += l;
        for (d, s) in grad.row_mut(i)[spans.old()].iter_mut().zip(g) {
            *d = s * inv;
        }
    }
    Ok(BatchLoss {
        loss: total * inv,
        grad,
    })
}
