use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::Param;
use crate::tensor::Tensor;

/// Per-channel batch normalization over `[n, c]` or `[n, c, h, w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    #[serde(skip)]
    pub(crate) cache: Option<BnCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![1.0; channels], true),
            beta: Param::new(vec![0.0; channels], true),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn spatial(&self, x: &Tensor) -> usize {
        assert_eq!(x.shape()[1], self.channels, "batch-norm channel mismatch");
        x.shape()[2..].iter().product()
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let hw = self.spatial(x);
        let mut y = x.clone();
        for i in 0..x.rows() {
            let row = y.row_mut(i);
            for c in 0..self.channels {
                let inv = 1.0 / libm::sqrt(self.running_var[c] + self.eps);
                let (g, b, m) = (self.gamma.value[c], self.beta.value[c], self.running_mean[c]);
                for v in &mut row[c * hw..(c + 1) * hw] {
                    *v = (*v - m) * inv * g + b;
                }
            }
        }
        y
    }

    pub fn forward_train(&mut self, x: Tensor) -> Tensor {
        let hw = self.spatial(&x);
        let n = x.rows();
        let count = (n * hw) as f64;
        let mut mean = vec![0.0; self.channels];
        let mut var = vec![0.0; self.channels];
        for i in 0..n {
            let row = x.row(i);
            for c in 0..self.channels {
                mean[c] += row[c * hw..(c + 1) * hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..n {
            let row = x.row(i);
            for c in 0..self.channels {
                var[c] += row[c * hw..(c + 1) * hw]
                    .iter()
                    .map(|v| (v - mean[c]) * (v - mean[c]))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + self.eps)).collect();
        let mut xhat = x;
        for i in 0..n {
            let row = xhat.row_mut(i);
            for c in 0..self.channels {
                for v in &mut row[c * hw..(c + 1) * hw] {
                    *v = (*v - mean[c]) * inv_std[c];
                }
            }
        }
        let mut y = xhat.clone();
        for i in 0..n {
            let row = y.row_mut(i);
            for c in 0..self.channels {
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                for v in &mut row[c * hw..(c + 1) * hw] {
                    *v = *v * g + b;
                }
            }
        }

        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for c in 0..self.channels {
            self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
            self.running_var[c] =
                (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c] * unbias;
        }
        self.cache = Some(BnCache { xhat, inv_std });
        y
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let BnCache { xhat, inv_std } = self.cache.take().expect("backward without forward");
        let hw = self.spatial(&xhat);
        let n = xhat.rows();
        let count = (n * hw) as f64;
        let mut sum_g = vec![0.0; self.channels];
        let mut sum_gx = vec![0.0; self.channels];
        for i in 0..n {
            let (g, xh) = (grad.row(i), xhat.row(i));
            for c in 0..self.channels {
                for k in c * hw..(c + 1) * hw {
                    sum_g[c] += g[k];
                    sum_gx[c] += g[k] * xh[k];
                }
            }
        }
        {
            let dg = self.gamma.grad_mut();
            for c in 0..self.channels {
                dg[c] += sum_gx[c];
            }
        }
        {
            let db = self.beta.grad_mut();
            for c in 0..self.channels {
                db[c] += sum_g[c];
            }
        }
        // dx = gamma * inv_std / M * (M g - sum g - xhat * sum(g xhat))
        let mut dx = grad;
        for i in 0..n {
            let xh = xhat.row(i);
            let row = dx.row_mut(i);
            for c in 0..self.channels {
                let scale = self.gamma.value[c] * inv_std[c] / count;
                for k in c * hw..(c + 1) * hw {
                    row[k] = scale * (count * row[k] - sum_g[c] - xh[k] * sum_gx[c]);
                }
            }
        }
        dx
    }
}
