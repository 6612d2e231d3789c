//! SGD with momentum and weight decay, and learning-rate schedules.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;

/// Per-epoch learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Cosine annealing from `start` at epoch 0 to `end` at the last epoch.
    Cosine { start: f64, end: f64 },
    /// `start` divided by `factor` at each listed epoch.
    Step { start: f64, milestones: Vec<usize>, factor: f64 },
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize, total_epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::Cosine { start, end } => {
                if total_epochs <= 1 {
                    return *start;
                }
                let t = epoch.min(total_epochs - 1) as f64 / (total_epochs - 1) as f64;
                end + 0.5 * (start - end) * (1.0 + libm::cos(core::f64::consts::PI * t))
            }
            LrSchedule::Step { start, milestones, factor } => {
                let k = milestones.iter().filter(|&&m| epoch >= m).count() as i32;
                start / libm::pow(*factor, k as f64)
            }
        }
    }

    pub fn initial(&self) -> f64 {
        self.lr(0, 2)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LrSchedule::Constant { lr } => *lr > 0.0,
            LrSchedule::Cosine { start, end } => *start > 0.0 && *end >= 0.0,
            LrSchedule::Step { start, milestones, factor } => {
                *start > 0.0 && *factor > 0.0 && milestones.windows(2).all(|w| w[0] < w[1])
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Schedule(format!("invalid learning-rate schedule {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Momentum SGD with coupled L2 decay: `g += wd * w; v = mu * v + g; w -= lr * v`.
/// Parameters with `decay == false` skip the decay term.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    /// Applies one update to parameters visited in a fixed order. The first
    /// call sizes the momentum buffers.
    pub fn step<F>(&mut self, lr: f64, visit: F) -> Result<()>
    where
        F: FnOnce(&mut dyn FnMut(&mut Param)),
    {
        let SgdConfig { momentum, weight_decay } = self.config;
        let velocity = &mut self.velocity;
        let mut index = 0usize;
        let mut err = None;
        visit(&mut |p: &mut Param| {
            if index == velocity.len() {
                velocity.push(alloc::vec![0.0; p.value.len()]);
            }
            let v = &mut velocity[index];
            index += 1;
            if v.len() != p.value.len() {
                err = Some(Error::Contract("parameter layout changed under the optimizer".into()));
                return;
            }
            p.grad_mut();
            let wd = if p.decay { weight_decay } else { 0.0 };
            for ((w, g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                let g = g + wd * *w;
                *vel = momentum * *vel + g;
                *w -= lr * *vel;
            }
        });
        if index != velocity.len() && err.is_none() {
            err = Some(Error::Contract("parameter count changed under the optimizer".into()));
        }
        err.map_or(Ok(()), Err)
    }
}
