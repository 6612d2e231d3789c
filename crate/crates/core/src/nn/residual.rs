use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::{BatchNorm, Conv2d, Param, Relu};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Basic residual block: conv-bn-relu-conv-bn, plus shortcut, then relu.
///
/// When the block downsamples, the shortcut takes every `stride`-th pixel and
/// zero-pads the extra channels, so the shortcut carries no parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub relu1: Relu,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub relu_out: Relu,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    #[serde(skip)]
    input_shape: Vec<usize>,
}

impl BasicBlock {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut Rng) -> Self {
        Self {
            conv1: Conv2d::new(in_ch, out_ch, 3, stride, 1, rng),
            bn1: BatchNorm::new(out_ch),
            relu1: Relu::default(),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, rng),
            bn2: BatchNorm::new(out_ch),
            relu_out: Relu::default(),
            in_ch,
            out_ch,
            stride,
            input_shape: Vec::new(),
        }
    }

    fn shortcut(&self, x: &Tensor, out_shape: &[usize]) -> Tensor {
        if self.stride == 1 && self.in_ch == self.out_ch {
            return x.clone();
        }
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let pad = (self.out_ch - self.in_ch) / 2;
        let mut out = Tensor::zeros(out_shape);
        for i in 0..s[0] {
            let src = x.row(i);
            let dst = out.row_mut(i);
            for c in 0..self.in_ch {
                for y in 0..oh {
                    for xx in 0..ow {
                        dst[((c + pad) * oh + y) * ow + xx] =
                            src[(c * h + y * self.stride) * w + xx * self.stride];
                    }
                }
            }
        }
        out
    }

    fn shortcut_backward(&self, grad: &Tensor) -> Tensor {
        if self.stride == 1 && self.in_ch == self.out_ch {
            return grad.clone();
        }
        let s = &self.input_shape;
        let (h, w) = (s[2], s[3]);
        let gs = grad.shape();
        let (oh, ow) = (gs[2], gs[3]);
        let pad = (self.out_ch - self.in_ch) / 2;
        let mut dx = Tensor::zeros(s);
        for i in 0..s[0] {
            let g = grad.row(i);
            let dst = dx.row_mut(i);
            for c in 0..self.in_ch {
                for y in 0..oh {
                    for xx in 0..ow {
                        dst[(c * h + y * self.stride) * w + xx * self.stride] +=
                            g[((c + pad) * oh + y) * ow + xx];
                    }
                }
            }
        }
        dx
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let h = self.conv1.infer(x);
        let h = Relu::infer(&self.bn1.infer(&h));
        let mut h = self.bn2.infer(&self.conv2.infer(&h));
        let sc = self.shortcut(x, h.shape());
        h.add_assign(&sc);
        Relu::infer(&h)
    }

    pub fn forward_train(&mut self, x: Tensor) -> Tensor {
        self.input_shape = x.shape().to_vec();
        let h = self.conv1.forward_train(x.clone());
        let h = self.relu1.forward_train(self.bn1.forward_train(h));
        let mut h = self.bn2.forward_train(self.conv2.forward_train(h));
        let sc = self.shortcut(&x, h.shape());
        h.add_assign(&sc);
        self.relu_out.forward_train(h)
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let g = self.relu_out.backward(grad);
        let mut dx = self.shortcut_backward(&g);
        let g = self.bn2.backward(g);
        let g = self.conv2.backward(g);
        let g = self.relu1.backward(g);
        let g = self.bn1.backward(g);
        let g = self.conv1.backward(g);
        dx.add_assign(&g);
        dx
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.conv1.weight);
        f(&self.bn1.gamma);
        f(&self.bn1.beta);
        f(&self.conv2.weight);
        f(&self.bn2.gamma);
        f(&self.bn2.beta);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.conv1.weight);
        f(&mut self.bn1.gamma);
        f(&mut self.bn1.beta);
        f(&mut self.conv2.weight);
        f(&mut self.bn2.gamma);
        f(&mut self.bn2.beta);
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(&[f64])) {
        for bn in [&self.bn1, &self.bn2] {
            f(&bn.running_mean);
            f(&bn.running_var);
        }
    }

    pub fn clear_cache(&mut self) {
        self.conv1.input = None;
        self.conv2.input = None;
        self.bn1.cache = None;
        self.bn2.cache = None;
        self.relu1.mask.clear();
        self.relu_out.mask.clear();
    }
}
