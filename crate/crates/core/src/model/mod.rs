//! One-hidden-layer ReLU network with a softmax output, and exact gradients
//! with respect to its parameters and to its input.
//!
//! Arithmetic is `f64` throughout. Inputs may be `f32` (dataset pixels) or
//! `f64` (distortion iterates).

mod io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledVector;
use crate::error::{Error, Result};

pub use io::{read_params, write_params, MODEL_MAGIC, MODEL_VERSION};

/// Added to the tagged probability inside the log of [`cross_entropy`].
pub const LOG_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            num_classes,
        }
    }

    /// MNIST-shaped model with the desk-scale hidden width.
    pub fn mnist_desk() -> Self {
        Self::new(784, 64, 10)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "model needs positive dimensions and at least 2 classes, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        h * d + h + c * h + c
    }
}

/// Weights and biases. `w1` is `H x D` and `w2` is `C x H`, both row-major.
/// The same type carries gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    cfg: ModelConfig,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

pub type Gradients = Params;

impl Params {
    pub fn zeros(cfg: ModelConfig) -> Self {
        let (d, h, c) = (cfg.input_dim, cfg.hidden_dim, cfg.num_classes);
        Self {
            cfg,
            w1: vec![0.0; h * d],
            b1: vec![0.0; h],
            w2: vec![0.0; c * h],
            b2: vec![0.0; c],
        }
    }

    /// Builds params from explicit buffers, checking their lengths.
    pub fn from_parts(
        cfg: ModelConfig,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, h, c) = (cfg.input_dim, cfg.hidden_dim, cfg.num_classes);
        for (what, got, expected) in [
            ("w1", w1.len(), h * d),
            ("b1", b1.len(), h),
            ("w2", w2.len(), c * h),
            ("b2", b2.len(), c),
        ] {
            if got != expected {
                return Err(Error::DimensionMismatch {
                    what,
                    expected,
                    got,
                });
            }
        }
        Ok(Self {
            cfg,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.cfg
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Flat view in `w1, b1, w2, b2` order.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors().into_iter().flat_map(|t| t.iter().copied())
    }

    /// Mutable flat access in `w1, b1, w2, b2` order.
    pub fn get_mut(&mut self, mut index: usize) -> &mut f64 {
        for t in self.tensors_mut() {
            if index < t.len() {
                return &mut t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    /// Rounds every entry to the nearest `f32`, the precision of the model file.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.cfg.input_dim {
            return Err(Error::DimensionMismatch {
                what: "input vector",
                expected: self.cfg.input_dim,
                got: len,
            });
        }
        Ok(())
    }
}

/// He initialization: `w1 ~ N(0, 2/D)`, `w2 ~ N(0, 2/H)`, zero biases.
pub fn init_params(cfg: ModelConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::zeros(cfg);
    let n1 = Normal::new(0.0, (2.0 / cfg.input_dim as f64).sqrt()).expect("positive std");
    let n2 = Normal::new(0.0, (2.0 / cfg.hidden_dim as f64).sqrt()).expect("positive std");
    p.w1.iter_mut().for_each(|w| *w = n1.sample(&mut rng));
    p.w2.iter_mut().for_each(|w| *w = n2.sample(&mut rng));
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Hidden pre-activations.
    pub z1: Vec<f64>,
    /// Hidden outputs, `max(z1, 0)`.
    pub a1: Vec<f64>,
    /// Logits.
    pub z2: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Dot product with four interleaved accumulators, which lets the compiler
/// vectorize it. The summation order is fixed, so results are reproducible.
#[inline]
fn dot<T: Copy + Into<f64>>(w: &[f64], x: &[T]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (wc, xc) = (w.chunks_exact(4), x.chunks_exact(4));
    let (wr, xr) = (wc.remainder(), xc.remainder());
    for (w4, x4) in wc.zip(xc) {
        for k in 0..4 {
            acc[k] += w4[k] * x4[k].into();
        }
    }
    let tail: f64 = wr.iter().zip(xr).map(|(&w, &x)| w * x.into()).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Softmax with the max logit subtracted first.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn forward_unchecked<T: Copy + Into<f64>>(w: &Params, x: &[T]) -> ForwardTrace {
    let ModelConfig {
        input_dim: d,
        hidden_dim: h,
        num_classes: c,
    } = w.cfg;
    let z1: Vec<f64> = (0..h)
        .map(|i| dot(&w.w1[i * d..(i + 1) * d], x) + w.b1[i])
        .collect();
    let a1: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();
    let z2: Vec<f64> = (0..c)
        .map(|k| dot(&w.w2[k * h..(k + 1) * h], &a1) + w.b2[k])
        .collect();
    let probs = softmax(&z2);
    ForwardTrace { z1, a1, z2, probs }
}

pub fn forward<T: Copy + Into<f64>>(w: &Params, x: &[T]) -> Result<ForwardTrace> {
    w.check_input(x.len())?;
    Ok(forward_unchecked(w, x))
}

/// Index of the largest probability; ties go to the lowest class index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict<T: Copy + Into<f64>>(w: &Params, x: &[T]) -> Result<usize> {
    Ok(argmax(&forward(w, x)?.probs))
}

/// `-ln(probs[tag] + 1e-12)`.
pub fn cross_entropy(probs: &[f64], tag: usize) -> f64 {
    -(probs[tag] + LOG_GUARD).ln()
}

/// Squared Euclidean distance.
pub fn input_distance<A, B>(x: &[A], x_s: &[B]) -> Result<f64>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    if x.len() != x_s.len() {
        return Err(Error::DimensionMismatch {
            what: "input distance operand",
            expected: x.len(),
            got: x_s.len(),
        });
    }
    Ok(x
        .iter()
        .zip(x_s)
        .map(|(&a, &b)| {
            let d = a.into() - b.into();
            d * d
        })
        .sum())
}

/// d(loss)/d(logits) for the guarded cross-entropy.
fn logit_delta(probs: &[f64], tag: usize) -> Vec<f64> {
    let pt = probs[tag];
    let r = pt / (pt + LOG_GUARD);
    probs
        .iter()
        .enumerate()
        .map(|(j, &p)| r * (p - if j == tag { 1.0 } else { 0.0 }))
        .collect()
}

/// Hidden-layer delta from the logit delta; the ReLU derivative at 0 is 0.
fn hidden_delta(w: &Params, trace: &ForwardTrace, dz2: &[f64]) -> Vec<f64> {
    let (h, c) = (w.cfg.hidden_dim, w.cfg.num_classes);
    (0..h)
        .map(|i| {
            if trace.z1[i] > 0.0 {
                (0..c).map(|k| w.w2[k * h + i] * dz2[k]).sum()
            } else {
                0.0
            }
        })
        .collect()
}

/// Adds the gradient of one example's loss, scaled by `scale`, into `grad`,
/// and returns that example's (unscaled) loss.
pub(crate) fn accumulate_example<T: Copy + Into<f64>>(
    w: &Params,
    x: &[T],
    tag: usize,
    scale: f64,
    grad: &mut Gradients,
) -> f64 {
    let (d, h, c) = (w.cfg.input_dim, w.cfg.hidden_dim, w.cfg.num_classes);
    let trace = forward_unchecked(w, x);
    let dz2 = logit_delta(&trace.probs, tag);
    for k in 0..c {
        let g = scale * dz2[k];
        grad.b2[k] += g;
        let row = &mut grad.w2[k * h..(k + 1) * h];
        for (r, &a) in row.iter_mut().zip(&trace.a1) {
            *r += g * a;
        }
    }
    let dz1 = hidden_delta(w, &trace, &dz2);
    for i in 0..h {
        let g = scale * dz1[i];
        if g == 0.0 {
            continue;
        }
        grad.b1[i] += g;
        let row = &mut grad.w1[i * d..(i + 1) * d];
        for (r, &xv) in row.iter_mut().zip(x) {
            *r += g * xv.into();
        }
    }
    cross_entropy(&trace.probs, tag)
}

/// Gradient of the mean cross-entropy over `batch`, by backpropagation.
pub fn grad_params(w: &Params, batch: &[LabeledVector]) -> Result<Gradients> {
    grad_params_with_loss(w, batch.iter()).map(|(g, _)| g)
}

/// Mean-loss gradient and the mean loss itself.
pub fn grad_params_with_loss<'a>(
    w: &Params,
    batch: impl ExactSizeIterator<Item = &'a LabeledVector>,
) -> Result<(Gradients, f64)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let scale = 1.0 / n as f64;
    let mut grad = Params::zeros(w.cfg);
    let mut loss = 0.0;
    for item in batch {
        w.check_input(item.pixels.len())?;
        if item.tag >= w.cfg.num_classes {
            return Err(Error::DimensionMismatch {
                what: "class tag",
                expected: w.cfg.num_classes,
                got: item.tag,
            });
        }
        loss += accumulate_example(w, &item.pixels, item.tag, scale, &mut grad);
    }
    Ok((grad, loss * scale))
}

/// Gradient with respect to `x` of
/// `cross_entropy(forward(w, x), target) + lambda * input_distance(x, x_s)`.
pub fn grad_input<A, B>(
    w: &Params,
    x: &[A],
    target_tag: usize,
    x_s: &[B],
    lambda: f64,
) -> Result<Vec<f64>>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    w.check_input(x.len())?;
    w.check_input(x_s.len())?;
    if target_tag >= w.cfg.num_classes {
        return Err(Error::DimensionMismatch {
            what: "class tag",
            expected: w.cfg.num_classes,
            got: target_tag,
        });
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("lambda {lambda} must be >= 0")));
    }
    Ok(grad_input_unchecked(w, x, target_tag, x_s, lambda))
}

pub(crate) fn grad_input_unchecked<A, B>(
    w: &Params,
    x: &[A],
    target_tag: usize,
    x_s: &[B],
    lambda: f64,
) -> Vec<f64>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    let d = w.cfg.input_dim;
    let trace = forward_unchecked(w, x);
    let dz2 = logit_delta(&trace.probs, target_tag);
    let dz1 = hidden_delta(w, &trace, &dz2);
    let mut g: Vec<f64> = x
        .iter()
        .zip(x_s)
        .map(|(&a, &b)| 2.0 * lambda * (a.into() - b.into()))
        .collect();
    for (i, &delta) in dz1.iter().enumerate() {
        if delta == 0.0 {
            continue;
        }
        for (gj, &wij) in g.iter_mut().zip(&w.w1[i * d..(i + 1) * d]) {
            *gj += delta * wij;
        }
    }
    g
}
