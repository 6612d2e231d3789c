use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::Param;
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

/// Fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out_dim, in_dim]`, row-major.
    pub weight: Param,
    pub bias: Param,
    #[serde(skip)]
    pub(crate) input: Option<Tensor>,
}

impl Linear {
    /// Uniform init in `±gain/sqrt(fan_in)`.
    pub fn new(in_dim: usize, out_dim: usize, gain: f64, rng: &mut Rng) -> Self {
        let bound = gain / libm::sqrt(in_dim as f64);
        Self {
            in_dim,
            out_dim,
            weight: Param::uniform(in_dim * out_dim, bound, rng, true),
            bias: Param::uniform(out_dim, 1.0 / libm::sqrt(in_dim as f64), rng, true),
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let n = x.rows();
        debug_assert_eq!(x.row_len(), self.in_dim);
        let mut out = Tensor::zeros(&[n, self.out_dim]);
        for i in 0..n {
            out.row_mut(i).copy_from_slice(&self.bias.value);
        }
        gemm(
            n,
            self.in_dim,
            self.out_dim,
            1.0,
            x.data(),
            false,
            &self.weight.value,
            true,
            1.0,
            out.data_mut(),
        );
        out
    }

    pub fn forward_train(&mut self, x: Tensor) -> Tensor {
        let y = self.infer(&x);
        self.input = Some(x);
        y
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let x = self.input.take().expect("backward without forward");
        let n = x.rows();
        let (i, o) = (self.in_dim, self.out_dim);
        gemm(o, n, i, 1.0, grad.data(), true, x.data(), false, 1.0, self.weight.grad_mut());
        let db = self.bias.grad_mut();
        for r in 0..n {
            for (d, g) in db.iter_mut().zip(grad.row(r)) {
                *d += g;
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        gemm(n, o, i, 1.0, grad.data(), false, &self.weight.value, false, 0.0, dx.data_mut());
        dx
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Relu {
    #[serde(skip)]
    pub(crate) mask: Vec<bool>,
}

impl Relu {
    pub fn infer(x: &Tensor) -> Tensor {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    pub fn forward_train(&mut self, mut x: Tensor) -> Tensor {
        self.mask = x.data().iter().map(|&v| v > 0.0).collect();
        x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        x
    }

    pub fn backward(&mut self, mut grad: Tensor) -> Tensor {
        for (g, &m) in grad.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *g = 0.0;
            }
        }
        grad
    }
}

/// `[n, ...] -> [n, prod(...)]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Flatten {
    #[serde(skip)]
    pub(crate) shape: Vec<usize>,
}

impl Flatten {
    pub fn infer(x: &Tensor) -> Tensor {
        let (n, w) = (x.rows(), x.row_len());
        x.clone().reshape(&[n, w]).expect("same size")
    }

    pub fn forward_train(&mut self, x: Tensor) -> Tensor {
        self.shape = x.shape().to_vec();
        let (n, w) = (x.rows(), x.row_len());
        x.reshape(&[n, w]).expect("same size")
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        grad.reshape(&self.shape).expect("same size")
    }
}
