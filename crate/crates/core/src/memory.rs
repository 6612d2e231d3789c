//! Exemplar memory.
//!
//! Old-class sets are trimmed by keeping their first `m` entries; each new
//! class gets `m` randomly drawn samples ordered by ascending distance of
//! their feature to the class feature mean, so the farthest exemplars are the
//! first to go at the next trim.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureMap;
use crate::protocol::{ClassId, TaskView};
use crate::rng::{below, seeded, shuffle, Rng};
use crate::tensor::{l2_distance, l2_norm, Tensor};

/// A stored raw sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    /// Index into the training split it was drawn from.
    pub source_index: usize,
    /// Output node of its class.
    pub position: usize,
    /// Distance to the class feature mean at insertion time.
    pub distance: f64,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarMemory {
    capacity: usize,
    per_class: usize,
    sample_shape: Vec<usize>,
    sets: BTreeMap<ClassId, Vec<Exemplar>>,
}

/// All samples of one new class, as handed to [`update_exemplar_sets`].
#[derive(Debug, Clone, PartialEq)]
pub struct NewClassData<'a> {
    pub class: ClassId,
    pub position: usize,
    /// `(source index, raw input)` pairs.
    pub samples: Vec<(usize, &'a [f64])>,
}

impl<'a> NewClassData<'a> {
    /// Groups the samples of a task view by class, in output order.
    pub fn from_view(view: &TaskView<'a>) -> Vec<NewClassData<'a>> {
        view.per_class()
            .into_iter()
            .zip(&view.new_class_ids)
            .map(|((position, js), &class)| NewClassData {
                class,
                position,
                samples: js.iter().map(|&j| (view.source_index(j), view.input(j))).collect(),
            })
            .collect()
    }
}

/// Outcome of an update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub per_class: usize,
    /// Classes that had fewer than `per_class` samples: `(class, stored)`.
    pub short_classes: Vec<(ClassId, usize)>,
}

/// `class → source indices` listing, the persisted form of a memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryDump {
    pub capacity: usize,
    pub per_class: usize,
    pub sets: BTreeMap<ClassId, Vec<usize>>,
}

/// Exemplars per class for capacity `K` over `t` seen classes: `K / t`.
pub fn exemplars_per_class(capacity: usize, seen_classes: usize) -> Result<usize> {
    if seen_classes == 0 {
        return Err(Error::InvalidArgument("no classes seen".into()));
    }
    let m = capacity / seen_classes;
    if m == 0 {
        return Err(Error::InvalidArgument(format!(
            "memory of {capacity} cannot hold one exemplar for each of {seen_classes} classes"
        )));
    }
    Ok(m)
}

impl ExemplarMemory {
    pub fn new(capacity: usize, sample_shape: Vec<usize>) -> Self {
        Self {
            capacity,
            per_class: 0,
            sample_shape,
            sets: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn num_classes(&self) -> usize {
        self.sets.len()
    }

    pub fn len(&self) -> usize {
        self.sets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set(&self, class: ClassId) -> Option<&[Exemplar]> {
        self.sets.get(&class).map(Vec::as_slice)
    }

    pub fn sets(&self) -> impl Iterator<Item = (ClassId, &[Exemplar])> {
        self.sets.iter().map(|(&c, v)| (c, v.as_slice()))
    }

    pub fn contains_class(&self, class: ClassId) -> bool {
        self.sets.contains_key(&class)
    }

    /// Keeps the first `m` exemplars of every stored class.
    pub fn truncate(&mut self, m: usize) {
        for set in self.sets.values_mut() {
            set.truncate(m);
        }
        self.per_class = m;
    }

    pub fn dump(&self) -> MemoryDump {
        MemoryDump {
            capacity: self.capacity,
            per_class: self.per_class,
            sets: self
                .sets
                .iter()
                .map(|(&c, v)| (c, v.iter().map(|e| e.source_index).collect()))
                .collect(),
        }
    }

    /// All stored exemplars, classes in id order.
    pub fn iter(&self) -> impl Iterator<Item = &Exemplar> {
        self.sets.values().flatten()
    }

    pub fn batch(&self, items: &[&Exemplar]) -> Tensor {
        let rows: Vec<&[f64]> = items.iter().map(|e| e.input.as_slice()).collect();
        Tensor::stack(&self.sample_shape, &rows).expect("exemplars share the sample shape")
    }
}

/// Draws `k` distinct indices from `0..n` (partial Fisher–Yates), in draw order.
fn sample_without_replacement(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = i + below(rng, (n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

const FEATURE_CHUNK: usize = 256;

fn features_of<F: FeatureMap + ?Sized>(
    extractor: &F,
    shape: &[usize],
    inputs: &[&[f64]],
    normalize: bool,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(FEATURE_CHUNK) {
        let f = extractor.features(&Tensor::stack(shape, chunk)?)?;
        for i in 0..f.rows() {
            let mut row = f.row(i).to_vec();
            if normalize {
                let n = l2_norm(&row).max(1e-12);
                row.iter_mut().for_each(|v| *v /= n);
            }
            out.push(row);
        }
    }
    Ok(out)
}

/// Trims old sets to `m`, then adds `m` random exemplars for every new class,
/// sorted by ascending distance to the class feature mean under `extractor`.
///
/// A class with fewer than `m` samples stores all of them and is listed in
/// the report; an empty class is an error.
pub fn update_exemplar_sets<F: FeatureMap + ?Sized>(
    memory: &mut ExemplarMemory,
    new_classes: &[NewClassData<'_>],
    m: usize,
    extractor: &F,
    seed: u64,
    normalize_features: bool,
) -> Result<UpdateReport> {
    if m == 0 {
        return Err(Error::InvalidArgument("exemplars per class must be at least 1".into()));
    }
    if let Some(c) = new_classes.iter().find(|c| c.samples.is_empty()) {
        return Err(Error::EmptyClass(c.class));
    }
    memory.truncate(m);
    let mut report = UpdateReport {
        per_class: m,
        short_classes: Vec::new(),
    };
    let mut rng = seeded(seed);
    for class in new_classes {
        let picked = sample_without_replacement(&mut rng, class.samples.len(), m);
        if picked.len() < m {
            report.short_classes.push((class.class, picked.len()));
        }
        let inputs: Vec<&[f64]> = picked.iter().map(|&i| class.samples[i].1).collect();
        let feats = features_of(extractor, &memory.sample_shape, &inputs, normalize_features)?;
        let d = feats[0].len();
        let mut mean = alloc::vec![0.0; d];
        for f in &feats {
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|v| *v /= feats.len() as f64);

        let mut set: Vec<Exemplar> = picked
            .iter()
            .zip(&feats)
            .map(|(&i, f)| Exemplar {
                source_index: class.samples[i].0,
                position: class.position,
                distance: l2_distance(&mean, f),
                input: class.samples[i].1.to_vec(),
            })
            .collect();
        set.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then(a.source_index.cmp(&b.source_index))
        });
        memory.sets.insert(class.class, set);
    }
    Ok(report)
}

/// Shuffled mini-batches over every stored exemplar; each epoch visits every
/// exemplar exactly once, and the stream reshuffles when an epoch ends.
#[derive(Debug, Clone)]
pub struct ExemplarSampler<'m> {
    items: Vec<&'m Exemplar>,
    batch_size: usize,
    rng: Rng,
    cursor: usize,
    epoch: usize,
}

impl<'m> ExemplarSampler<'m> {
    pub fn new(memory: &'m ExemplarMemory, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let mut s = Self {
            items: memory.iter().collect(),
            batch_size,
            rng: seeded(seed),
            cursor: 0,
            epoch: 0,
        };
        shuffle(&mut s.rng, &mut s.items);
        Ok(s)
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Batches per epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.items.len().div_ceil(self.batch_size)
    }

    /// Completed epochs so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Next batch, cycling forever; `None` only for an empty memory.
    pub fn next_batch(&mut self) -> Option<Vec<&'m Exemplar>> {
        if self.items.is_empty() {
            return None;
        }
        if self.cursor >= self.items.len() {
            shuffle(&mut self.rng, &mut self.items);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.batch_size).min(self.items.len());
        let batch = self.items[self.cursor..end].to_vec();
        self.cursor = end;
        Some(batch)
    }

    /// One full pass as a list of batches.
    pub fn epoch_batches(&mut self) -> Vec<Vec<&'m Exemplar>> {
        let n = self.batches_per_epoch();
        if self.cursor != 0 && self.cursor < self.items.len() {
            // Finish the partial epoch so the returned pass is complete.
            while self.cursor < self.items.len() {
                self.next_batch();
            }
        }
        (0..n).filter_map(|_| self.next_batch()).collect()
    }
}
