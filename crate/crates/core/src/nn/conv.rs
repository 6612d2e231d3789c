use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::Param;
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

/// 2-D convolution without bias, square kernel, zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out_ch, in_ch, kernel, kernel]`.
    pub weight: Param,
    #[serde(skip)]
    pub(crate) input: Option<Tensor>,
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Conv2d {
    /// Kaiming-normal init in fan-out mode.
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let std = libm::sqrt(2.0 / (out_ch * kernel * kernel) as f64);
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            weight: Param::gaussian(out_ch * in_ch * kernel * kernel, std, rng, true),
            input: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn geometry(&self, x: &Tensor) -> Geometry {
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv input must be [n, c, h, w]");
        assert_eq!(s[1], self.in_ch, "conv channel mismatch");
        let (oh, ow) = self.output_hw(s[2], s[3]);
        Geometry {
            c: s[1],
            h: s[2],
            w: s[3],
            oh,
            ow,
        }
    }

    fn im2col(&self, g: &Geometry, input: &[f64], cols: &mut [f64]) {
        let k = self.kernel;
        let ohw = g.oh * g.ow;
        for ci in 0..g.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..g.oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        for ox in 0..g.ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            dst[oy * g.ow + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < g.h
                                && (ix as usize) < g.w
                            {
                                input[(ci * g.h + iy as usize) * g.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, g: &Geometry, cols: &[f64], out: &mut [f64]) {
        let k = self.kernel;
        let ohw = g.oh * g.ow;
        for ci in 0..g.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..g.oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        for ox in 0..g.ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                out[(ci * g.h + iy as usize) * g.w + ix as usize] +=
                                    src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let g = self.geometry(x);
        let n = x.rows();
        let ckk = g.c * self.kernel * self.kernel;
        let ohw = g.oh * g.ow;
        let mut out = Tensor::zeros(&[n, self.out_ch, g.oh, g.ow]);
        let mut cols = vec![0.0; ckk * ohw];
        for i in 0..n {
            self.im2col(&g, x.row(i), &mut cols);
            gemm(
                self.out_ch,
                ckk,
                ohw,
                1.0,
                &self.weight.value,
                false,
                &cols,
                false,
                0.0,
                out.row_mut(i),
            );
        }
        out
    }

    pub fn forward_train(&mut self, x: Tensor) -> Tensor {
        let y = self.infer(&x);
        self.input = Some(x);
        y
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let x = self.input.take().expect("backward without forward");
        let g = self.geometry(&x);
        let n = x.rows();
        let ckk = g.c * self.kernel * self.kernel;
        let ohw = g.oh * g.ow;
        let mut cols = vec![0.0; ckk * ohw];
        let mut dcols = vec![0.0; ckk * ohw];
        let mut dx = Tensor::zeros(x.shape());
        for i in 0..n {
            self.im2col(&g, x.row(i), &mut cols);
            let gi = grad.row(i);
            gemm(self.out_ch, ohw, ckk, 1.0, gi, false, &cols, true, 1.0, self.weight.grad_mut());
            gemm(ckk, self.out_ch, ohw, 1.0, &self.weight.value, true, gi, false, 0.0, &mut dcols);
            self.col2im(&g, &dcols, dx.row_mut(i));
        }
        dx
    }
}

/// `[n, c, h, w] -> [n, c]` by spatial mean.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalAvgPool {
    #[serde(skip)]
    pub(crate) shape: Vec<usize>,
}

impl GlobalAvgPool {
    pub fn infer(x: &Tensor) -> Tensor {
        let s = x.shape();
        let (n, c) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let row = x.row(i);
            for ch in 0..c {
                out.data_mut()[i * c + ch] =
                    row[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: Tensor) -> Tensor {
        self.shape = x.shape().to_vec();
        Self::infer(&x)
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let (n, c) = (self.shape[0], self.shape[1]);
        let hw: usize = self.shape[2..].iter().product();
        let mut dx = Tensor::zeros(&self.shape);
        for i in 0..n {
            let row = dx.row_mut(i);
            for ch in 0..c {
                let g = grad.data()[i * c + ch] / hw as f64;
                row[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = g);
            }
        }
        dx
    }
}
