use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::{BasicBlock, BatchNorm, Conv2d, Flatten, GlobalAvgPool, Layer, Linear, Param, Relu};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Architecture of the feature extractor φ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExtractorSpec {
    /// A single affine map to `out_dim` features.
    Linear { out_dim: usize },
    /// Affine (+ batch norm) + ReLU stages; the last hidden width is the
    /// feature dimension.
    Mlp {
        hidden: Vec<usize>,
        #[serde(default)]
        batch_norm: bool,
    },
    /// CIFAR-style residual network of depth `6n + 2` with stage widths
    /// `width, 2*width, 4*width`.
    Resnet { depth: usize, width: usize },
}

impl ExtractorSpec {
    pub fn resnet32() -> Self {
        ExtractorSpec::Resnet { depth: 32, width: 16 }
    }

    pub fn mlp(hidden: Vec<usize>) -> Self {
        ExtractorSpec::Mlp { hidden, batch_norm: false }
    }
}

/// Sequential feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_shape: Vec<usize>,
    pub feature_dim: usize,
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn build(spec: &ExtractorSpec, input_shape: &[usize], rng: &mut Rng) -> Result<Self> {
        let flat: usize = input_shape.iter().product();
        if flat == 0 {
            return Err(Error::InvalidArgument(format!("empty input shape {input_shape:?}")));
        }
        let mut layers = Vec::new();
        let feature_dim = match spec {
            ExtractorSpec::Linear { out_dim } => {
                if input_shape.len() > 1 {
                    layers.push(Layer::Flatten(Flatten::default()));
                }
                layers.push(Layer::Linear(Linear::new(flat, *out_dim, 1.0, rng)));
                *out_dim
            }
            ExtractorSpec::Mlp { hidden, batch_norm } => {
                if hidden.is_empty() {
                    return Err(Error::InvalidArgument("mlp needs at least one hidden layer".into()));
                }
                if input_shape.len() > 1 {
                    layers.push(Layer::Flatten(Flatten::default()));
                }
                let mut prev = flat;
                for &h in hidden {
                    layers.push(Layer::Linear(Linear::new(prev, h, libm::sqrt(6.0), rng)));
                    if *batch_norm {
                        layers.push(Layer::BatchNorm(BatchNorm::new(h)));
                    }
                    layers.push(Layer::Relu(Relu::default()));
                    prev = h;
                }
                prev
            }
            ExtractorSpec::Resnet { depth, width } => {
                if input_shape.len() != 3 {
                    return Err(Error::InvalidArgument(format!(
                        "resnet needs [c, h, w] inputs, got {input_shape:?}"
                    )));
                }
                if *depth < 8 || (depth - 2) % 6 != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "resnet depth must be 6n+2, got {depth}"
                    )));
                }
                let blocks = (depth - 2) / 6;
                let c = input_shape[0];
                layers.push(Layer::Conv2d(Conv2d::new(c, *width, 3, 1, 1, rng)));
                layers.push(Layer::BatchNorm(BatchNorm::new(*width)));
                layers.push(Layer::Relu(Relu::default()));
                let mut ch = *width;
                for stage in 0..3 {
                    let out = width << stage;
                    for b in 0..blocks {
                        let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                        layers.push(Layer::Residual(Box::new(BasicBlock::new(ch, out, stride, rng))));
                        ch = out;
                    }
                }
                layers.push(Layer::GlobalAvgPool(GlobalAvgPool::default()));
                ch
            }
        };
        Ok(Self {
            input_shape: input_shape.to_vec(),
            feature_dim,
            layers,
        })
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() < 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape {
                expected: format!("[n, {:?}]", self.input_shape),
                actual: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    /// Features in evaluation mode; no state is touched.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer(&h);
        }
        Ok(h)
    }

    pub fn forward_train(&mut self, x: Tensor) -> Result<Tensor> {
        self.check_input(&x)?;
        let mut h = x;
        for l in &mut self.layers {
            h = l.forward_train(h);
        }
        Ok(h)
    }

    /// Backpropagates a feature gradient, accumulating parameter gradients.
    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let mut g = grad;
        for l in self.layers.iter_mut().rev() {
            g = l.backward(g);
        }
        g
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for l in &self.layers {
            l.visit_params(f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.layers {
            l.visit_buffers(f);
        }
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }
}
