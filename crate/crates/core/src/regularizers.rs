//! Representation regularizers: label smoothing, mixup, and heavy image
//! augmentation sampled from a policy pool. Self-distillation lives in the
//! trainer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Target;
use crate::rng::{below, unit, Rng};

/// Which regularizer a run uses; runs apply at most one.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Regularizer {
    #[default]
    None,
    /// Self-distillation generations after base training.
    Sd,
    /// Policy-pool augmentation plus cutout of `cutout` pixels square.
    HAug { cutout: usize },
    /// Label smoothing with mass `epsilon` spread uniformly.
    Ls { epsilon: f64 },
    /// Mixup with coefficient drawn from `Beta(alpha, alpha)`.
    Mixup { alpha: f64 },
}

impl Regularizer {
    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::Sd => "sd",
            Regularizer::HAug { .. } => "h-aug",
            Regularizer::Ls { .. } => "ls",
            Regularizer::Mixup { .. } => "mixup",
        }
    }

    pub fn smoothing(&self) -> f64 {
        match self {
            Regularizer::Ls { epsilon } => *epsilon,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Regularizer::Ls { epsilon } if !(0.0..1.0).contains(&epsilon) => Err(Error::InvalidArgument(
                format!("label smoothing epsilon must lie in [0, 1), got {epsilon}"),
            )),
            Regularizer::Mixup { alpha } if !(alpha > 0.0) => Err(Error::InvalidArgument(format!(
                "mixup alpha must be positive, got {alpha}"
            ))),
            _ => Ok(()),
        }
    }
}

/// `(1 - epsilon) * one_hot + epsilon * uniform`.
pub fn label_smooth(distribution: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "label smoothing epsilon must lie in [0, 1), got {epsilon}"
        )));
    }
    let t = distribution.len();
    if t < 2 {
        return Err(Error::InvalidArgument("label smoothing needs at least 2 classes".into()));
    }
    let sum: f64 = distribution.iter().sum();
    if distribution.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("input is not a probability distribution".into()));
    }
    let u = epsilon / t as f64;
    Ok(distribution.iter().map(|p| (1.0 - epsilon) * p + u).collect())
}

/// Mixing coefficient `gamma ~ Beta(alpha, alpha)`.
pub fn mix_coefficient(alpha: f64, rng: &mut Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidArgument(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

/// `gamma * a + (1 - gamma) * b`, elementwise.
pub fn mix_inputs(a: &[f64], b: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: format!("{} values", a.len()),
            actual: format!("{}", b.len()),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| gamma * x + (1.0 - gamma) * y).collect())
}

/// A mixed sample: input, label and the coefficient that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixed {
    pub input: Vec<f64>,
    pub label: Target,
    pub gamma: f64,
}

/// Draws `gamma` and blends both image and label.
pub fn mixup(
    a: (&[f64], &Target),
    b: (&[f64], &Target),
    alpha: f64,
    rng: &mut Rng,
) -> Result<Mixed> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("mixup alpha must be positive, got {alpha}")));
    }
    let gamma = mix_coefficient(alpha, rng)?;
    mix_with(a, b, gamma)
}

pub fn mix_with(a: (&[f64], &Target), b: (&[f64], &Target), gamma: f64) -> Result<Mixed> {
    Ok(Mixed {
        input: mix_inputs(a.0, b.0, gamma)?,
        label: Target::mix(a.1, b.1, gamma),
        gamma,
    })
}

/// Per-channel value range of the stored (normalized) pixels.
///
/// Color operations work in `[0, 1]` and map back through this range, so
/// their outputs stay inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelRange {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl PixelRange {
    pub fn unit(channels: usize) -> Self {
        Self {
            lo: vec![0.0; channels],
            hi: vec![1.0; channels],
        }
    }

    /// Range of `(v - mean) / std` for raw `v` in `[0, 1]`.
    pub fn normalized(mean: &[f64], std: &[f64]) -> Self {
        Self {
            lo: mean.iter().zip(std).map(|(m, s)| -m / s).collect(),
            hi: mean.iter().zip(std).map(|(m, s)| (1.0 - m) / s).collect(),
        }
    }
}

/// Image operations of the policy pool.
///
/// Magnitude units: shear as a slope in `[0, 0.3]`; translation as a fraction
/// of the side in `[0, 0.45]`; rotation in degrees `[0, 30]`; brightness,
/// contrast and saturation as enhancement factors in `[0.1, 1.9]`; posterize
/// as kept bits in `[4, 8]`; solarize as a threshold in `[0, 1]`. Geometric
/// magnitudes get a random sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugOp {
    Identity,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    Brightness,
    Contrast,
    Saturation,
    Posterize,
    Solarize,
    AutoContrast,
    Invert,
}

impl AugOp {
    pub fn is_geometric(self) -> bool {
        matches!(
            self,
            AugOp::ShearX | AugOp::ShearY | AugOp::TranslateX | AugOp::TranslateY | AugOp::Rotate
        )
    }

    /// Documented magnitude range.
    pub fn magnitude_range(self) -> (f64, f64) {
        match self {
            AugOp::ShearX | AugOp::ShearY => (0.0, 0.3),
            AugOp::TranslateX | AugOp::TranslateY => (0.0, 0.45),
            AugOp::Rotate => (0.0, 30.0),
            AugOp::Brightness | AugOp::Contrast | AugOp::Saturation => (0.1, 1.9),
            AugOp::Posterize => (4.0, 8.0),
            AugOp::Solarize => (0.0, 1.0),
            AugOp::Identity | AugOp::AutoContrast | AugOp::Invert => (0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpSpec {
    pub op: AugOp,
    pub prob: f64,
    pub magnitude: f64,
}

impl OpSpec {
    pub const fn new(op: AugOp, prob: f64, magnitude: f64) -> Self {
        Self { op, prob, magnitude }
    }
}

/// Two operations applied in order, each with its own probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub ops: [OpSpec; 2],
}

impl AugmentationPolicy {
    pub const IDENTITY: Self = Self {
        ops: [OpSpec::new(AugOp::Identity, 1.0, 0.0), OpSpec::new(AugOp::Identity, 1.0, 0.0)],
    };

    pub fn validate(&self) -> Result<()> {
        for s in &self.ops {
            let (lo, hi) = s.op.magnitude_range();
            if !(0.0..=1.0).contains(&s.prob) || s.magnitude < lo || s.magnitude > hi {
                return Err(Error::InvalidArgument(format!("policy op out of range: {s:?}")));
            }
        }
        Ok(())
    }

    /// Applies both operations to a `[c, h, w]` image.
    pub fn apply(&self, image: &[f64], shape: &[usize], range: &PixelRange, rng: &mut Rng) -> Result<Vec<f64>> {
        let dims = image_dims(image, shape, range)?;
        let mut out = image.to_vec();
        for s in &self.ops {
            if unit(rng) < s.prob {
                let sign = if unit(rng) < 0.5 { -1.0 } else { 1.0 };
                out = apply_op(s.op, s.magnitude * sign, &out, dims, range);
            }
        }
        Ok(out)
    }
}

/// Fixed pool of geometric/color operation pairs in the style of the
/// CIFAR AutoAugment sub-policies, extended so every pair mixes one geometric
/// and one color operation.
pub fn default_policy_pool() -> Vec<AugmentationPolicy> {
    use AugOp::*;
    let p = |a: AugOp, pa: f64, ma: f64, b: AugOp, pb: f64, mb: f64| AugmentationPolicy {
        ops: [OpSpec::new(a, pa, ma), OpSpec::new(b, pb, mb)],
    };
    vec![
        p(ShearX, 0.5, 0.2, Invert, 0.1, 0.0),
        p(TranslateY, 0.7, 0.3, Contrast, 0.3, 1.5),
        p(Rotate, 0.6, 20.0, Brightness, 0.7, 1.4),
        p(ShearY, 0.8, 0.25, Solarize, 0.4, 0.5),
        p(TranslateX, 0.5, 0.2, AutoContrast, 0.9, 0.0),
        p(Rotate, 0.7, 10.0, Posterize, 0.6, 5.0),
        p(ShearX, 0.3, 0.1, Saturation, 0.9, 1.6),
        p(TranslateY, 0.6, 0.1, Brightness, 0.5, 0.6),
        p(ShearY, 0.5, 0.15, Contrast, 0.6, 0.4),
        p(TranslateX, 0.3, 0.4, Solarize, 0.2, 0.7),
        p(Rotate, 0.4, 30.0, Saturation, 0.5, 0.3),
        p(ShearX, 0.7, 0.3, Posterize, 0.3, 6.0),
        p(TranslateY, 0.2, 0.45, AutoContrast, 0.6, 0.0),
        p(ShearY, 0.3, 0.05, Brightness, 0.9, 1.1),
        p(TranslateX, 0.8, 0.05, Contrast, 0.8, 1.8),
        p(Rotate, 0.5, 5.0, Invert, 0.2, 0.0),
    ]
}

/// Uniform draw from a non-empty pool.
pub fn sample_heavy_augmentation<'p>(pool: &'p [AugmentationPolicy], rng: &mut Rng) -> Result<&'p AugmentationPolicy> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("augmentation policy pool is empty".into()));
    }
    Ok(&pool[below(rng, pool.len() as u64) as usize])
}

#[derive(Clone, Copy)]
struct Dims {
    c: usize,
    h: usize,
    w: usize,
}

fn image_dims(image: &[f64], shape: &[usize], range: &PixelRange) -> Result<Dims> {
    if shape.len() != 3 || image.len() != shape.iter().product::<usize>() {
        return Err(Error::InvalidArgument(format!(
            "image augmentation needs [c, h, w] samples, got shape {shape:?}"
        )));
    }
    if range.lo.len() != shape[0] || range.hi.len() != shape[0] {
        return Err(Error::InvalidArgument("pixel range does not match channel count".into()));
    }
    Ok(Dims {
        c: shape[0],
        h: shape[1],
        w: shape[2],
    })
}

fn to_unit(v: f64, c: usize, r: &PixelRange) -> f64 {
    (v - r.lo[c]) / (r.hi[c] - r.lo[c])
}

fn from_unit(u: f64, c: usize, r: &PixelRange) -> f64 {
    r.lo[c] + u.clamp(0.0, 1.0) * (r.hi[c] - r.lo[c])
}

/// Inverse-mapped affine warp with nearest-neighbour sampling; uncovered
/// pixels get mid-gray.
fn warp(img: &[f64], d: Dims, range: &PixelRange, inv: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    let (cy, cx) = ((d.h as f64 - 1.0) / 2.0, (d.w as f64 - 1.0) / 2.0);
    for y in 0..d.h {
        for x in 0..d.w {
            let (sx, sy) = inv(x as f64 - cx, y as f64 - cy);
            let (sx, sy) = (libm::round(sx + cx), libm::round(sy + cy));
            let inside = sx >= 0.0 && sy >= 0.0 && (sx as usize) < d.w && (sy as usize) < d.h;
            for c in 0..d.c {
                out[(c * d.h + y) * d.w + x] = if inside {
                    img[(c * d.h + sy as usize) * d.w + sx as usize]
                } else {
                    from_unit(0.5, c, range)
                };
            }
        }
    }
    out
}

fn map_unit(img: &[f64], d: Dims, range: &PixelRange, f: impl Fn(usize, usize, f64) -> f64) -> Vec<f64> {
    let hw = d.h * d.w;
    img.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / hw;
            from_unit(f(c, i % hw, to_unit(v, c, range)), c, range)
        })
        .collect()
}

fn apply_op(op: AugOp, m: f64, img: &[f64], d: Dims, range: &PixelRange) -> Vec<f64> {
    let hw = d.h * d.w;
    let gray = |img: &[f64], p: usize| -> f64 {
        if d.c == 3 {
            0.299 * to_unit(img[p], 0, range)
                + 0.587 * to_unit(img[hw + p], 1, range)
                + 0.114 * to_unit(img[2 * hw + p], 2, range)
        } else {
            (0..d.c).map(|c| to_unit(img[c * hw + p], c, range)).sum::<f64>() / d.c as f64
        }
    };
    match op {
        AugOp::Identity => img.to_vec(),
        AugOp::ShearX => warp(img, d, range, |x, y| (x - m * y, y)),
        AugOp::ShearY => warp(img, d, range, |x, y| (x, y - m * x)),
        AugOp::TranslateX => {
            let t = m * d.w as f64;
            warp(img, d, range, |x, y| (x - t, y))
        }
        AugOp::TranslateY => {
            let t = m * d.h as f64;
            warp(img, d, range, |x, y| (x, y - t))
        }
        AugOp::Rotate => {
            let a = m.to_radians();
            let (s, c) = (libm::sin(a), libm::cos(a));
            warp(img, d, range, |x, y| (c * x + s * y, -s * x + c * y))
        }
        AugOp::Brightness => map_unit(img, d, range, |_, _, u| u * m.abs()),
        AugOp::Contrast => {
            let mean = (0..hw).map(|p| gray(img, p)).sum::<f64>() / hw as f64;
            map_unit(img, d, range, |_, _, u| mean + m.abs() * (u - mean))
        }
        AugOp::Saturation => {
            let g: Vec<f64> = (0..hw).map(|p| gray(img, p)).collect();
            map_unit(img, d, range, |_, p, u| g[p] + m.abs() * (u - g[p]))
        }
        AugOp::Posterize => {
            let shift = 8 - (m.abs() as u32).clamp(1, 8);
            map_unit(img, d, range, |_, _, u| {
                let q = ((u.clamp(0.0, 1.0) * 255.0) as u32 >> shift) << shift;
                q as f64 / 255.0
            })
        }
        AugOp::Solarize => map_unit(img, d, range, |_, _, u| if u >= m.abs() { 1.0 - u } else { u }),
        AugOp::AutoContrast => {
            let mut lo = vec![f64::INFINITY; d.c];
            let mut hi = vec![f64::NEG_INFINITY; d.c];
            for (i, &v) in img.iter().enumerate() {
                let c = i / hw;
                let u = to_unit(v, c, range);
                lo[c] = lo[c].min(u);
                hi[c] = hi[c].max(u);
            }
            map_unit(img, d, range, |c, _, u| {
                if hi[c] > lo[c] {
                    (u - lo[c]) / (hi[c] - lo[c])
                } else {
                    u
                }
            })
        }
        AugOp::Invert => map_unit(img, d, range, |_, _, u| 1.0 - u),
    }
}

/// Random crop from a zero-padded image plus random horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineAugment {
    pub crop_padding: usize,
    pub flip: bool,
}

impl Default for BaselineAugment {
    fn default() -> Self {
        Self {
            crop_padding: 4,
            flip: true,
        }
    }
}

impl BaselineAugment {
    pub fn apply(&self, image: &[f64], shape: &[usize], rng: &mut Rng) -> Result<Vec<f64>> {
        if shape.len() != 3 {
            return Err(Error::InvalidArgument(format!("crop/flip needs [c, h, w] samples, got {shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let p = self.crop_padding;
        let dy = below(rng, 2 * p as u64 + 1) as isize - p as isize;
        let dx = below(rng, 2 * p as u64 + 1) as isize - p as isize;
        let flip = self.flip && unit(rng) < 0.5;
        let mut out = vec![0.0; image.len()];
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xo = if flip { w - 1 - x } else { x };
                    let sx = xo as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Zeroes a `size x size` square (clipped at the border) at a random centre.
pub fn cutout(image: &mut [f64], shape: &[usize], size: usize, rng: &mut Rng) -> Result<()> {
    if shape.len() != 3 {
        return Err(Error::InvalidArgument(format!("cutout needs [c, h, w] samples, got {shape:?}")));
    }
    if size == 0 {
        return Ok(());
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let cy = below(rng, h as u64) as isize;
    let cx = below(rng, w as u64) as isize;
    let half = (size / 2) as isize;
    let (y0, y1) = ((cy - half).max(0) as usize, ((cy - half + size as isize).min(h as isize)).max(0) as usize);
    let (x0, x1) = ((cx - half).max(0) as usize, ((cx - half + size as isize).min(w as isize)).max(0) as usize);
    for ch in 0..c {
        for y in y0..y1 {
            for x in x0..x1 {
                image[(ch * h + y) * w + x] = 0.0;
            }
        }
    }
    Ok(())
}

/// Per-sample input transformation for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPipeline {
    pub baseline: Option<BaselineAugment>,
    pub heavy: Option<(Vec<AugmentationPolicy>, usize)>,
    pub range: PixelRange,
}

impl DataPipeline {
    pub fn identity(channels: usize) -> Self {
        Self {
            baseline: None,
            heavy: None,
            range: PixelRange::unit(channels),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.baseline.is_none() && self.heavy.is_none()
    }

    pub fn apply(&self, input: &[f64], shape: &[usize], rng: &mut Rng) -> Result<Vec<f64>> {
        let mut x = match &self.baseline {
            Some(b) => b.apply(input, shape, rng)?,
            None => input.to_vec(),
        };
        if let Some((pool, hole)) = &self.heavy {
            let policy = sample_heavy_augmentation(pool, rng)?;
            x = policy.apply(&x, shape, &self.range, rng)?;
            cutout(&mut x, shape, *hole, rng)?;
        }
        Ok(x)
    }
}
