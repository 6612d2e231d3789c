//! Benchmark protocol: labeled datasets, the shuffled class-to-task schedule,
//! and the per-step view of what data is visible.
//!
//! Model output index `k` always corresponds to `class_order[k]`, so the
//! classes of step `i` occupy a contiguous range of output nodes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Spans;
use crate::rng::{seeded, shuffle};
use crate::tensor::Tensor;

/// Dense class identifier `0..C`.
pub type ClassId = u32;

/// Samples with fine labels and optional superclass labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    inputs: Vec<f64>,
    fine: Vec<ClassId>,
    coarse: Option<Vec<ClassId>>,
    num_classes: usize,
}

/// One sample borrowed from a [`Dataset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledExample<'a> {
    pub input: &'a [f64],
    pub fine_label: ClassId,
    pub coarse_label: Option<ClassId>,
}

impl Dataset {
    pub fn new(
        sample_shape: Vec<usize>,
        inputs: Vec<f64>,
        fine: Vec<ClassId>,
        coarse: Option<Vec<ClassId>>,
        num_classes: usize,
    ) -> Result<Self> {
        let width: usize = sample_shape.iter().product();
        if width == 0 || inputs.len() != width * fine.len() {
            return Err(Error::Shape {
                expected: format!("{} samples of {sample_shape:?}", fine.len()),
                actual: format!("{} values", inputs.len()),
            });
        }
        if let Some(&bad) = fine.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "fine label {bad} outside 0..{num_classes}"
            )));
        }
        let ds = Self {
            sample_shape,
            inputs,
            fine,
            coarse,
            num_classes,
        };
        if let Some(c) = &ds.coarse {
            if c.len() != ds.fine.len() {
                return Err(Error::InvalidArgument("coarse label count differs from fine".into()));
            }
            ds.superclass_map()?;
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.fine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let w = self.sample_len();
        &self.inputs[i * w..(i + 1) * w]
    }

    pub fn fine(&self, i: usize) -> ClassId {
        self.fine[i]
    }

    pub fn fine_labels(&self) -> &[ClassId] {
        &self.fine
    }

    pub fn has_coarse(&self) -> bool {
        self.coarse.is_some()
    }

    pub fn example(&self, i: usize) -> LabeledExample<'_> {
        LabeledExample {
            input: self.input(i),
            fine_label: self.fine[i],
            coarse_label: self.coarse.as_ref().map(|c| c[i]),
        }
    }

    /// Fine class → superclass, checking that every fine class maps to
    /// exactly one superclass. Classes without samples map to `u32::MAX`.
    pub fn superclass_map(&self) -> Result<Vec<ClassId>> {
        let coarse = self
            .coarse
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("dataset has no coarse labels".into()))?;
        let mut map = vec![ClassId::MAX; self.num_classes];
        for (&f, &c) in self.fine.iter().zip(coarse) {
            let slot = &mut map[f as usize];
            if *slot == ClassId::MAX {
                *slot = c;
            } else if *slot != c {
                return Err(Error::InvalidArgument(format!(
                    "fine class {f} appears under superclasses {} and {c}",
                    *slot
                )));
            }
        }
        Ok(map)
    }

    /// Sample indices grouped by fine class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes];
        for (i, &f) in self.fine.iter().enumerate() {
            by[f as usize].push(i);
        }
        by
    }

    /// Stacks the given samples into a `[n, sample_shape..]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.input(i)).collect();
        Tensor::stack(&self.sample_shape, &rows).expect("samples share the dataset shape")
    }

    /// A dataset restricted to `indices` (labels and shape kept).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
        }
        Dataset {
            sample_shape: self.sample_shape.clone(),
            inputs,
            fine: indices.iter().map(|&i| self.fine[i]).collect(),
            coarse: self.coarse.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
            num_classes: self.num_classes,
        }
    }
}

/// Shuffled partition of classes into a base task followed by equal-sized
/// incremental tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaskSchedule {
    class_order: Vec<ClassId>,
    base_count: usize,
    task_sizes: Vec<usize>,
    seed: u64,
}

impl ClassTaskSchedule {
    /// Shuffles `0..total_classes` with `seed`; the first `base_count`
    /// classes form the base task and the rest is split into `num_tasks`
    /// equal groups.
    pub fn build(total_classes: usize, base_count: usize, num_tasks: usize, seed: u64) -> Result<Self> {
        let mut order: Vec<ClassId> = (0..total_classes as ClassId).collect();
        shuffle(&mut seeded(seed), &mut order);
        let mut s = Self::with_order(order, base_count, num_tasks)?;
        s.seed = seed;
        Ok(s)
    }

    /// Schedule over an explicit class order.
    pub fn with_order(class_order: Vec<ClassId>, base_count: usize, num_tasks: usize) -> Result<Self> {
        let total = class_order.len();
        if base_count == 0 || base_count > total {
            return Err(Error::Schedule(format!(
                "base task needs 1..={total} classes, got {base_count}"
            )));
        }
        let mut seen = vec![false; total];
        for &c in &class_order {
            if c as usize >= total || core::mem::replace(&mut seen[c as usize], true) {
                return Err(Error::Schedule(format!(
                    "class order is not a permutation of 0..{total}"
                )));
            }
        }
        let rest = total - base_count;
        let task_sizes = match (num_tasks, rest) {
            (0, 0) => Vec::new(),
            (0, _) => {
                return Err(Error::Schedule(format!(
                    "{rest} classes remain after the base task but no incremental tasks were requested"
                )))
            }
            (n, r) if r % n != 0 || r < n => {
                return Err(Error::Schedule(format!(
                    "{r} remaining classes ({total} total - {base_count} base) cannot be split into {n} equal tasks"
                )))
            }
            (n, r) => vec![r / n; n],
        };
        Ok(Self {
            class_order,
            base_count,
            task_sizes,
            seed: 0,
        })
    }

    pub fn class_order(&self) -> &[ClassId] {
        &self.class_order
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn base_count(&self) -> usize {
        self.base_count
    }

    /// Number of incremental tasks `N`.
    pub fn num_tasks(&self) -> usize {
        self.task_sizes.len()
    }

    pub fn num_steps(&self) -> usize {
        self.num_tasks() + 1
    }

    pub fn total_classes(&self) -> usize {
        self.class_order.len()
    }

    /// Classes per step, base task first.
    pub fn sizes(&self) -> Vec<usize> {
        let mut v = vec![self.base_count];
        v.extend_from_slice(&self.task_sizes);
        v
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step > self.num_tasks() {
            return Err(Error::StepOutOfRange {
                step,
                num_tasks: self.num_tasks(),
            });
        }
        Ok(())
    }

    /// Output-index range of the classes introduced at `step`.
    pub fn task_range(&self, step: usize) -> Result<Range<usize>> {
        self.check_step(step)?;
        let start = if step == 0 {
            0
        } else {
            self.base_count + self.task_sizes[..step - 1].iter().sum::<usize>()
        };
        let len = if step == 0 { self.base_count } else { self.task_sizes[step - 1] };
        Ok(start..start + len)
    }

    pub fn task_classes(&self, step: usize) -> Result<&[ClassId]> {
        Ok(&self.class_order[self.task_range(step)?])
    }

    /// Classes seen up to and including `step`.
    pub fn seen_classes(&self, step: usize) -> Result<&[ClassId]> {
        Ok(&self.class_order[..self.task_range(step)?.end])
    }

    pub fn spans(&self, step: usize) -> Result<Spans> {
        let r = self.task_range(step)?;
        Spans::new(r.start, r.end)
    }

    /// Class → output index.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![usize::MAX; self.class_order.len()];
        for (k, &c) in self.class_order.iter().enumerate() {
            pos[c as usize] = k;
        }
        pos
    }

    /// Step at which output index `position` was introduced.
    pub fn step_of_position(&self, position: usize) -> usize {
        if position < self.base_count {
            return 0;
        }
        let mut end = self.base_count;
        for (i, s) in self.task_sizes.iter().enumerate() {
            end += s;
            if position < end {
                return i + 1;
            }
        }
        self.num_tasks()
    }

    /// Data visible at `step`: complete data of the step's classes only.
    pub fn task_view<'a>(&self, step: usize, dataset: &'a Dataset) -> Result<TaskView<'a>> {
        let range = self.task_range(step)?;
        if dataset.num_classes() != self.total_classes() {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} classes, schedule {}",
                dataset.num_classes(),
                self.total_classes()
            )));
        }
        let positions = self.positions();
        let indices: Vec<usize> = (0..dataset.len())
            .filter(|&i| range.contains(&positions[dataset.fine(i) as usize]))
            .collect();
        let targets = indices.iter().map(|&i| positions[dataset.fine(i) as usize]).collect();
        Ok(TaskView {
            step,
            old_class_ids: self.class_order[..range.start].to_vec(),
            new_class_ids: self.class_order[range.clone()].to_vec(),
            spans: Spans::new(range.start, range.end)?,
            dataset,
            indices,
            targets,
        })
    }
}

/// Per-step view: full data of the new classes, ids of the old ones.
#[derive(Debug, Clone)]
pub struct TaskView<'a> {
    pub step: usize,
    pub old_class_ids: Vec<ClassId>,
    pub new_class_ids: Vec<ClassId>,
    pub spans: Spans,
    dataset: &'a Dataset,
    indices: Vec<usize>,
    targets: Vec<usize>,
}

impl<'a> TaskView<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Index into the source dataset of the `j`-th visible sample.
    pub fn source_index(&self, j: usize) -> usize {
        self.indices[j]
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn input(&self, j: usize) -> &'a [f64] {
        self.dataset.input(self.indices[j])
    }

    pub fn fine(&self, j: usize) -> ClassId {
        self.dataset.fine(self.indices[j])
    }

    /// Output index of the `j`-th sample's class.
    pub fn target(&self, j: usize) -> usize {
        self.targets[j]
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.dataset.sample_shape()
    }

    /// Stacks visible samples `js` (view-local indices).
    pub fn batch(&self, js: &[usize]) -> Tensor {
        let rows: Vec<&[f64]> = js.iter().map(|&j| self.input(j)).collect();
        Tensor::stack(self.dataset.sample_shape(), &rows).expect("same shape")
    }

    /// View-local indices grouped by output index, for the new classes in order.
    pub fn per_class(&self) -> Vec<(usize, Vec<usize>)> {
        let r = self.spans.new_span();
        let mut groups: Vec<(usize, Vec<usize>)> = r.map(|p| (p, Vec::new())).collect();
        for (j, &t) in self.targets.iter().enumerate() {
            groups[t - self.spans.num_old()].1.push(j);
        }
        groups
    }
}
