//! Synthetic desk-scale benchmark: Gaussian class clusters grouped into
//! superclasses.
//!
//! Superclass centres are drawn far apart, class centres are scattered around
//! their superclass centre, and samples around their class centre, so
//! classes of one superclass are similar and the superclass labels carry
//! real secondary structure.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{ClassId, Dataset};
use crate::rng::{normal, SeedStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskSpec {
    pub num_classes: usize,
    pub num_superclasses: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Spread of superclass centres.
    pub superclass_spread: f64,
    /// Spread of class centres around their superclass centre.
    pub class_spread: f64,
    /// Per-coordinate noise of samples around their class centre.
    pub sample_noise: f64,
    pub seed: u64,
}

impl Default for DeskSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            num_superclasses: 5,
            dim: 32,
            train_per_class: 100,
            test_per_class: 50,
            superclass_spread: 0.2,
            class_spread: 0.1,
            sample_noise: 0.3,
            seed: 0,
        }
    }
}

impl DeskSpec {
    /// Superclass of each fine class: contiguous blocks.
    pub fn superclass_of(&self, class: usize) -> ClassId {
        let per = self.num_classes / self.num_superclasses;
        (class / per) as ClassId
    }

    /// `(train, test)` splits.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        if self.num_superclasses == 0
            || self.num_classes % self.num_superclasses != 0
            || self.dim == 0
            || self.train_per_class == 0
            || self.test_per_class == 0
        {
            return Err(Error::InvalidArgument(alloc::format!(
                "desk benchmark needs classes divisible into superclasses and non-empty splits: {self:?}"
            )));
        }
        let seeds = SeedStream::new(self.seed);
        let mut rng = seeds.rng("desk-centres", 0);
        let supers: Vec<Vec<f64>> = (0..self.num_superclasses)
            .map(|_| (0..self.dim).map(|_| self.superclass_spread * normal(&mut rng)).collect())
            .collect();
        let centres: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|c| {
                let s = &supers[self.superclass_of(c) as usize];
                s.iter().map(|v| v + self.class_spread * normal(&mut rng)).collect()
            })
            .collect();
        let split = |count: usize, purpose: &str| -> Result<Dataset> {
            let mut rng = seeds.rng(purpose, 0);
            let mut x = Vec::with_capacity(count * self.num_classes * self.dim);
            let mut fine = Vec::with_capacity(count * self.num_classes);
            let mut coarse = Vec::with_capacity(count * self.num_classes);
            for (c, centre) in centres.iter().enumerate() {
                for _ in 0..count {
                    x.extend(centre.iter().map(|v| v + self.sample_noise * normal(&mut rng)));
                    fine.push(c as ClassId);
                    coarse.push(self.superclass_of(c));
                }
            }
            Dataset::new(alloc::vec![self.dim], x, fine, Some(coarse), self.num_classes)
        };
        Ok((split(self.train_per_class, "desk-train")?, split(self.test_per_class, "desk-test")?))
    }
}
