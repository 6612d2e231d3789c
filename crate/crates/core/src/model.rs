//! The incremental classifier: a shared feature extractor and a head with one
//! weight vector per seen class, growable between steps.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LogitsSplit, Spans};
use crate::nn::{ExtractorSpec, Network, Param};
use crate::rng::Rng;
use crate::tensor::{dot, gemm, l2_norm, Tensor};

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// Affine layer `<w, f> + b`.
    Dot,
    /// `scale * <w/|w|, f/|f|>` with a learnable scale and no bias.
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
struct HeadCache {
    features: Tensor,
    /// Cosine mode only: unit features, their norms, unit weights, weight norms.
    unit_features: Tensor,
    feature_norms: Vec<f64>,
    unit_weights: Vec<f64>,
    weight_norms: Vec<f64>,
}

/// Classification layer over `num_classes` outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub mode: HeadMode,
    pub feature_dim: usize,
    /// `[num_classes, feature_dim]`; class `k` owns row `k`.
    pub weights: Param,
    /// Dot mode only.
    pub bias: Param,
    /// Cosine mode only, a single value.
    pub scale: Param,
    #[serde(skip)]
    cache: Option<HeadCache>,
}

fn normalize_rows(data: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = if width == 0 { 0 } else { data.len() / width };
    let mut unit = data.to_vec();
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &mut unit[r * width..(r + 1) * width];
        let n = l2_norm(row).max(NORM_EPS);
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (unit, norms)
}

impl ClassifierHead {
    pub fn new(mode: HeadMode, feature_dim: usize, num_classes: usize, scale_init: f64, rng: &mut Rng) -> Self {
        let mut head = Self {
            mode,
            feature_dim,
            weights: Param::new(Vec::new(), true),
            bias: Param::new(Vec::new(), true),
            scale: Param::new(
                match mode {
                    HeadMode::Cosine => vec![scale_init],
                    HeadMode::Dot => Vec::new(),
                },
                false,
            ),
            cache: None,
        };
        head.append_classes(num_classes, rng);
        head
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len() / self.feature_dim
    }

    /// Appends fan-in scaled uniform rows; existing rows are not touched.
    fn append_classes(&mut self, n: usize, rng: &mut Rng) {
        let bound = 1.0 / libm::sqrt(self.feature_dim as f64);
        let fresh = Param::uniform(n * self.feature_dim, bound, rng, true);
        self.weights.value.extend_from_slice(&fresh.value);
        if self.mode == HeadMode::Dot {
            let b = Param::uniform(n, bound, rng, true);
            self.bias.value.extend_from_slice(&b.value);
        }
        self.weights.zero_grad();
        self.bias.zero_grad();
    }

    pub fn class_weights(&self, k: usize) -> &[f64] {
        &self.weights.value[k * self.feature_dim..(k + 1) * self.feature_dim]
    }

    fn logits_from(&self, features: &Tensor) -> (Tensor, Option<HeadCache>) {
        let n = features.rows();
        let (t, d) = (self.num_classes(), self.feature_dim);
        let mut out = Tensor::zeros(&[n, t]);
        match self.mode {
            HeadMode::Dot => {
                for i in 0..n {
                    out.row_mut(i).copy_from_slice(&self.bias.value);
                }
                gemm(n, d, t, 1.0, features.data(), false, &self.weights.value, true, 1.0, out.data_mut());
                (out, None)
            }
            HeadMode::Cosine => {
                let (uf, fnorm) = normalize_rows(features.data(), d);
                let (uw, wnorm) = normalize_rows(&self.weights.value, d);
                gemm(n, d, t, self.scale.value[0], &uf, false, &uw, true, 0.0, out.data_mut());
                let cache = HeadCache {
                    features: features.clone(),
                    unit_features: Tensor::from_vec(features.shape(), uf).expect("same shape"),
                    feature_norms: fnorm,
                    unit_weights: uw,
                    weight_norms: wnorm,
                };
                (out, Some(cache))
            }
        }
    }

    pub fn infer(&self, features: &Tensor) -> Tensor {
        self.logits_from(features).0
    }

    pub fn forward_train(&mut self, features: Tensor) -> Tensor {
        let (out, cache) = self.logits_from(&features);
        self.cache = Some(cache.unwrap_or(HeadCache {
            features,
            unit_features: Tensor::zeros(&[0]),
            feature_norms: Vec::new(),
            unit_weights: Vec::new(),
            weight_norms: Vec::new(),
        }));
        out
    }

    /// Accumulates head gradients and returns the feature gradient.
    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("backward without forward");
        let n = grad.rows();
        let (t, d) = (self.num_classes(), self.feature_dim);
        match self.mode {
            HeadMode::Dot => {
                gemm(t, n, d, 1.0, grad.data(), true, cache.features.data(), false, 1.0, self.weights.grad_mut());
                let db = self.bias.grad_mut();
                for i in 0..n {
                    for (b, g) in db.iter_mut().zip(grad.row(i)) {
                        *b += g;
                    }
                }
                let mut df = Tensor::zeros(cache.features.shape());
                gemm(n, t, d, 1.0, grad.data(), false, &self.weights.value, false, 0.0, df.data_mut());
                df
            }
            HeadMode::Cosine => {
                let s = self.scale.value[0];
                let uf = cache.unit_features.data();
                let uw = &cache.unit_weights;
                // d scale = sum_ik g_ik * cos_ik
                let mut cos = vec![0.0; n * t];
                gemm(n, d, t, 1.0, uf, false, uw, true, 0.0, &mut cos);
                self.scale.grad_mut()[0] += dot(grad.data(), &cos);

                // Gradient through w -> w/|w|: (I - u u^T) g / |w|.
                let mut duw = vec![0.0; t * d];
                gemm(t, n, d, s, grad.data(), true, uf, false, 0.0, &mut duw);
                let dw = self.weights.grad_mut();
                for k in 0..t {
                    let u = &uw[k * d..(k + 1) * d];
                    let g = &duw[k * d..(k + 1) * d];
                    let proj = dot(u, g);
                    let inv = 1.0 / cache.weight_norms[k];
                    for j in 0..d {
                        dw[k * d + j] += (g[j] - u[j] * proj) * inv;
                    }
                }

                let mut duf = vec![0.0; n * d];
                gemm(n, t, d, s, grad.data(), false, uw, false, 0.0, &mut duf);
                let mut df = Tensor::zeros(cache.features.shape());
                for i in 0..n {
                    let u = &uf[i * d..(i + 1) * d];
                    let g = &duf[i * d..(i + 1) * d];
                    let proj = dot(u, g);
                    let inv = 1.0 / cache.feature_norms[i];
                    for (j, out) in df.row_mut(i).iter_mut().enumerate() {
                        *out = (g[j] - u[j] * proj) * inv;
                    }
                }
                df
            }
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weights);
        f(&self.bias);
        f(&self.scale);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weights);
        f(&mut self.bias);
        f(&mut self.scale);
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Logits of a batch together with the current old/new spans.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLogits {
    pub logits: Tensor,
    pub spans: Spans,
}

impl BatchLogits {
    pub fn split(&self, i: usize) -> LogitsSplit<'_> {
        LogitsSplit::new(self.logits.row(i), self.spans).expect("logit width matches spans")
    }
}

/// Anything that maps inputs to penultimate-layer features.
pub trait FeatureMap {
    fn features(&self, x: &Tensor) -> Result<Tensor>;
}

impl FeatureMap for Network {
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.infer(x)
    }
}

/// Feature extractor plus expandable head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalClassifier {
    pub extractor: Network,
    pub head: ClassifierHead,
    num_old: usize,
}

impl IncrementalClassifier {
    pub fn new(
        spec: &ExtractorSpec,
        input_shape: &[usize],
        mode: HeadMode,
        num_classes: usize,
        cosine_scale_init: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("classifier needs at least one class".into()));
        }
        if mode == HeadMode::Cosine && !(cosine_scale_init > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cosine scale must be positive, got {cosine_scale_init}"
            )));
        }
        let extractor = Network::build(spec, input_shape, rng)?;
        let head = ClassifierHead::new(mode, extractor.feature_dim, num_classes, cosine_scale_init, rng);
        Ok(Self {
            extractor,
            head,
            num_old: 0,
        })
    }

    pub fn from_parts(extractor: Network, head: ClassifierHead, num_old: usize) -> Result<Self> {
        if head.feature_dim != extractor.feature_dim || num_old > head.num_classes() {
            return Err(Error::InvalidArgument("inconsistent classifier parts".into()));
        }
        Ok(Self {
            extractor,
            head,
            num_old,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn spans(&self) -> Spans {
        Spans::new(self.num_old, self.num_classes()).expect("head spans are consistent")
    }

    /// Adds `num_new` output nodes; the previous outputs become the old span.
    pub fn expand_head(&mut self, num_new: usize, rng: &mut Rng) -> Result<()> {
        if num_new == 0 {
            return Err(Error::InvalidArgument("expand_head needs num_new >= 1".into()));
        }
        self.num_old = self.num_classes();
        self.head.append_classes(num_new, rng);
        Ok(())
    }

    /// Evaluation-mode logits with span annotation.
    pub fn forward(&self, x: &Tensor) -> Result<BatchLogits> {
        let f = self.extractor.infer(x)?;
        Ok(BatchLogits {
            logits: self.head.infer(&f),
            spans: self.spans(),
        })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.logits)
    }

    /// Training-mode forward pass; caches activations for [`Self::backward`].
    pub fn forward_train(&mut self, x: Tensor) -> Result<Tensor> {
        let f = self.extractor.forward_train(x)?;
        Ok(self.head.forward_train(f))
    }

    pub fn backward(&mut self, grad_logits: &Tensor) {
        let gf = self.head.backward(grad_logits);
        self.extractor.backward(gf);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.extractor.visit_params(f);
        self.head.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.extractor.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }

    pub fn clear_cache(&mut self) {
        self.extractor.clear_cache();
        self.head.clear_cache();
    }

    /// Frozen deep copy.
    pub fn snapshot(&self) -> ModelSnapshot {
        let mut copy = self.clone();
        copy.clear_cache();
        ModelSnapshot(Arc::new(copy))
    }

    /// Mean Euclidean norm of the head weight vectors over each range;
    /// `None` for an empty range.
    pub fn weight_norms(&self, old: Range<usize>, new: Range<usize>) -> Result<(Option<f64>, Option<f64>)> {
        let t = self.num_classes();
        if old.end > t || new.end > t {
            return Err(Error::InvalidArgument(format!("span exceeds {t} classes")));
        }
        let mean = |r: Range<usize>| {
            if r.is_empty() {
                return None;
            }
            let n = r.len() as f64;
            Some(r.map(|k| l2_norm(self.head.class_weights(k))).sum::<f64>() / n)
        };
        Ok((mean(old), mean(new)))
    }

    /// Hash over every parameter and buffer bit, plus span metadata.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |v: &[f64]| {
            for x in v {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        eat(&[self.num_old as f64, self.num_classes() as f64]);
        self.visit_params(&mut |p| eat(&p.value));
        self.extractor.visit_buffers(&mut |b| eat(b));
        h
    }
}

impl FeatureMap for IncrementalClassifier {
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.extractor.infer(x)
    }
}

/// Immutable copy of a classifier at a step boundary; cheap to clone and share.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot(Arc<IncrementalClassifier>);

impl ModelSnapshot {
    pub fn model(&self) -> &IncrementalClassifier {
        &self.0
    }

    pub fn forward(&self, x: &Tensor) -> Result<BatchLogits> {
        self.0.forward(x)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.0.logits(x)
    }

    pub fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    /// Snapshotting a snapshot is the identity.
    pub fn snapshot(&self) -> ModelSnapshot {
        self.clone()
    }

    pub fn fingerprint(&self) -> u64 {
        self.0.fingerprint()
    }

    /// A trainable copy, e.g. to continue training from this snapshot.
    pub fn thaw(&self) -> IncrementalClassifier {
        (*self.0).clone()
    }
}

impl FeatureMap for ModelSnapshot {
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.0.features(x)
    }
}

impl<T: FeatureMap + ?Sized> FeatureMap for &T {
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        (**self).features(x)
    }
}
