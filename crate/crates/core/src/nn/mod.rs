//! Layers with explicit forward/backward passes.
//!
//! A layer caches what its backward pass needs during `forward_train` and
//! accumulates parameter gradients in `backward`. `infer` is the side-effect
//! free evaluation path (batch-norm uses running statistics).

mod conv;
mod dense;
mod network;
mod norm;
mod residual;

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::rng::{normal, unit, Rng};
use crate::tensor::Tensor;

pub use conv::{Conv2d, GlobalAvgPool};
pub use dense::{Flatten, Linear, Relu};
pub use network::{ExtractorSpec, Network};
pub use norm::BatchNorm;
pub use residual::BasicBlock;

/// A trainable parameter vector and its gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
    /// Whether weight decay applies.
    pub decay: bool,
}

impl Param {
    pub fn new(value: Vec<f64>, decay: bool) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad, decay }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.clear();
        self.grad.resize(self.value.len(), 0.0);
    }

    /// Gradient slice, sized to the value on first use after deserialization.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.len() != self.value.len() {
            self.zero_grad();
        }
        &mut self.grad
    }

    pub(crate) fn uniform(len: usize, bound: f64, rng: &mut Rng, decay: bool) -> Self {
        let value = (0..len).map(|_| (2.0 * unit(rng) - 1.0) * bound).collect();
        Self::new(value, decay)
    }

    pub(crate) fn gaussian(len: usize, std: f64, rng: &mut Rng, decay: bool) -> Self {
        let value = (0..len).map(|_| normal(rng) * std).collect();
        Self::new(value, decay)
    }
}

/// One stage of a feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Linear(Linear),
    Relu(Relu),
    Flatten(Flatten),
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    GlobalAvgPool(GlobalAvgPool),
    Residual(alloc::boxed::Box<BasicBlock>),
}

impl Layer {
    pub fn forward_train(&mut self, x: Tensor) -> Tensor {
        match self {
            Layer::Linear(l) => l.forward_train(x),
            Layer::Relu(l) => l.forward_train(x),
            Layer::Flatten(l) => l.forward_train(x),
            Layer::Conv2d(l) => l.forward_train(x),
            Layer::BatchNorm(l) => l.forward_train(x),
            Layer::GlobalAvgPool(l) => l.forward_train(x),
            Layer::Residual(l) => l.forward_train(x),
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Linear(l) => l.infer(x),
            Layer::Relu(_) => Relu::infer(x),
            Layer::Flatten(_) => Flatten::infer(x),
            Layer::Conv2d(l) => l.infer(x),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::GlobalAvgPool(_) => GlobalAvgPool::infer(x),
            Layer::Residual(l) => l.infer(x),
        }
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        match self {
            Layer::Linear(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::Flatten(l) => l.backward(grad),
            Layer::Conv2d(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::GlobalAvgPool(l) => l.backward(grad),
            Layer::Residual(l) => l.backward(grad),
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Layer::Linear(l) => {
                f(&l.weight);
                f(&l.bias);
            }
            Layer::Conv2d(l) => f(&l.weight),
            Layer::BatchNorm(l) => {
                f(&l.gamma);
                f(&l.beta);
            }
            Layer::Residual(b) => b.visit_params(f),
            Layer::Relu(_) | Layer::Flatten(_) | Layer::GlobalAvgPool(_) => {}
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Layer::Linear(l) => {
                f(&mut l.weight);
                f(&mut l.bias);
            }
            Layer::Conv2d(l) => f(&mut l.weight),
            Layer::BatchNorm(l) => {
                f(&mut l.gamma);
                f(&mut l.beta);
            }
            Layer::Residual(b) => b.visit_params_mut(f),
            Layer::Relu(_) | Layer::Flatten(_) | Layer::GlobalAvgPool(_) => {}
        }
    }

    /// Non-trainable state that still defines the function (batch-norm running statistics).
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&[f64])) {
        match self {
            Layer::BatchNorm(l) => {
                f(&l.running_mean);
                f(&l.running_var);
            }
            Layer::Residual(b) => b.visit_buffers(f),
            _ => {}
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Linear(l) => l.input = None,
            Layer::Relu(l) => l.mask.clear(),
            Layer::Flatten(l) => l.shape.clear(),
            Layer::Conv2d(l) => l.input = None,
            Layer::BatchNorm(l) => l.cache = None,
            Layer::GlobalAvgPool(l) => l.shape.clear(),
            Layer::Residual(b) => b.clear_cache(),
        }
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences against the analytic backward pass.

    use super::*;

    /// Loss used for checks: `0.5 * sum(w_i * y_i^2)` with fixed pseudo-random weights,
    /// so every output coordinate gets a distinct upstream gradient.
    fn probe_weights(n: usize) -> Vec<f64> {
        (0..n).map(|i| 0.5 + ((i * 7919) % 13) as f64 / 13.0).collect()
    }

    fn probe_loss(y: &Tensor) -> f64 {
        let w = probe_weights(y.len());
        0.5 * y.data().iter().zip(&w).map(|(v, w)| w * v * v).sum::<f64>()
    }

    fn probe_grad(y: &Tensor) -> Tensor {
        let w = probe_weights(y.len());
        let data = y.data().iter().zip(&w).map(|(v, w)| w * v).collect();
        Tensor::from_vec(y.shape(), data).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    /// Checks input and parameter gradients of `layer` at `x`.
    pub fn check_layer(layer: &Layer, x: &Tensor, tol: f64) {
        let h = 1e-5;
        let mut l = layer.clone();
        l.visit_params_mut(&mut |p| p.zero_grad());
        let y = l.forward_train(x.clone());
        let gx = l.backward(probe_grad(&y));

        let eval = |layer: &Layer, x: &Tensor| {
            let mut c = layer.clone();
            probe_loss(&c.forward_train(x.clone()))
        };

        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(layer, &xp) - eval(layer, &xm)) / (2.0 * h);
            let an = gx.data()[i];
            assert!(
                rel_err(fd, an) < tol || (fd - an).abs() < 1e-8,
                "input grad {i}: fd={fd} analytic={an}"
            );
        }

        let mut analytic = Vec::new();
        l.visit_params(&mut |p| analytic.push(p.grad.clone()));
        for (pi, grads) in analytic.iter().enumerate() {
            for j in 0..grads.len() {
                let perturbed = |delta: f64| {
                    let mut c = layer.clone();
                    let mut k = 0;
                    c.visit_params_mut(&mut |p| {
                        if k == pi {
                            p.value[j] += delta;
                        }
                        k += 1;
                    });
                    eval(&c, x)
                };
                let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
                let an = grads[j];
                assert!(
                    rel_err(fd, an) < tol || (fd - an).abs() < 1e-8,
                    "param {pi}[{j}]: fd={fd} analytic={an}"
                );
            }
        }
    }

    pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::seeded(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| normal(&mut rng)).collect()).unwrap()
    }
}
