//! Labeled datasets: MNIST-format IDX files, distorted generations produced
//! from them, and a small synthetic fixture.
//!
//! Pixels are stored as `f32` normalized to `[0, 1]`. Every constructor
//! validates the full invariant set, so any `Dataset` value in hand is
//! well-formed.

mod fetch;
mod idx;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fetch::{fetch_mnist, resolve_base_url, ChecksumTable, Digest, MnistFiles, DEFAULT_MNIST_URL, MNIST_URL_ENV};
pub use idx::{
    export_idx_u8, load_idx, load_idx_with_classes, lineage_sidecar_path, save_idx, IdxHeader,
    IdxType,
};

/// Number of classes in MNIST.
pub const MNIST_CLASSES: usize = 10;

/// Default per-dimension standard deviation of [`synthetic_blobs`].
pub const DEFAULT_BLOB_SPREAD: f64 = 0.08;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVector {
    pub pixels: Vec<f32>,
    pub tag: usize,
}

impl LabeledVector {
    pub fn new(pixels: Vec<f32>, tag: usize) -> Self {
        Self { pixels, tag }
    }
}

/// Where a dataset came from. Generation `K = 0` is original data; every
/// pass of the distortion generator increments `K` and records the model
/// and trade-off weight that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetLineage {
    pub source_name: String,
    #[serde(rename = "K")]
    pub generation: u32,
    pub generator_model_id: Option<String>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
}

impl DatasetLineage {
    pub fn original(source_name: impl Into<String>) -> Self {
        Self {
            source_name: source_name.into(),
            generation: 0,
            generator_model_id: None,
            lambda: None,
            seed: None,
        }
    }

    /// Lineage of a dataset generated from `self` by the model `model_id`.
    pub fn derived(&self, model_id: impl Into<String>, lambda: f64) -> Self {
        Self {
            source_name: self.source_name.clone(),
            generation: self.generation + 1,
            generator_model_id: Some(model_id.into()),
            lambda: Some(lambda),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k0 = self.generation == 0;
        if k0 == self.generator_model_id.is_some() {
            return Err(Error::InvalidDataset(format!(
                "lineage K={} requires generator_model_id to be {}",
                self.generation,
                if k0 { "absent" } else { "present" }
            )));
        }
        if k0 == self.lambda.is_some() {
            return Err(Error::InvalidDataset(format!(
                "lineage K={} requires lambda to be {}",
                self.generation,
                if k0 { "absent" } else { "present" }
            )));
        }
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::InvalidDataset(format!("lineage lambda {l} invalid")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    items: Vec<LabeledVector>,
    input_dim: usize,
    num_classes: usize,
    lineage: DatasetLineage,
}

impl Dataset {
    /// Builds a dataset, checking pixel range, dimensions, tags and lineage.
    /// An empty item list is allowed here; training and evaluation reject it.
    pub fn new(
        items: Vec<LabeledVector>,
        input_dim: usize,
        num_classes: usize,
        lineage: DatasetLineage,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidDataset("input_dim must be positive".into()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidDataset("num_classes must be at least 2".into()));
        }
        lineage.validate()?;
        for (i, item) in items.iter().enumerate() {
            if item.pixels.len() != input_dim {
                return Err(Error::InvalidDataset(format!(
                    "item {i} has {} pixels, expected {input_dim}",
                    item.pixels.len()
                )));
            }
            if item.tag >= num_classes {
                return Err(Error::InvalidDataset(format!(
                    "item {i} has tag {} >= {num_classes}",
                    item.tag
                )));
            }
            if let Some(p) = item.pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::InvalidDataset(format!(
                    "item {i} has pixel {p} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            items,
            input_dim,
            num_classes,
            lineage,
        })
    }

    pub fn items(&self) -> &[LabeledVector] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn lineage(&self) -> &DatasetLineage {
        &self.lineage
    }

    pub fn into_items(self) -> Vec<LabeledVector> {
        self.items
    }

    pub(crate) fn ensure_non_empty(&self) -> Result<()> {
        if self.items.is_empty() {
            Err(Error::EmptyDataset)
        } else {
            Ok(())
        }
    }

    /// Per-class item counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for item in &self.items {
            counts[item.tag] += 1;
        }
        counts
    }
}

/// Uniform sample of `n` items without replacement, deterministic per seed.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > ds.len() {
        return Err(Error::InvalidConfig(format!(
            "subsample size {n} out of range 1..={}",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, ds.len(), n);
    let items = picked.iter().map(|i| ds.items[i].clone()).collect();
    let mut lineage = ds.lineage.clone();
    lineage.seed = Some(seed);
    Dataset::new(items, ds.input_dim, ds.num_classes, lineage)
}

/// `num_classes` Gaussian blobs in `[0, 1]^dim`, with the default spread.
pub fn synthetic_blobs(
    n_per_class: usize,
    dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Dataset> {
    synthetic_blobs_with_spread(n_per_class, dim, num_classes, seed, DEFAULT_BLOB_SPREAD)
}

/// Class `c` is centred on the binary code of `c` mapped to {0.25, 0.75},
/// repeated across dimensions, so any two class means differ by at least
/// 0.5 in one coordinate. Samples are clipped to `[0, 1]` and interleaved
/// by class.
pub fn synthetic_blobs_with_spread(
    n_per_class: usize,
    dim: usize,
    num_classes: usize,
    seed: u64,
    spread: f64,
) -> Result<Dataset> {
    if n_per_class == 0 || dim == 0 || num_classes < 2 {
        return Err(Error::InvalidConfig(
            "synthetic_blobs needs n_per_class >= 1, dim >= 1, num_classes >= 2".into(),
        ));
    }
    let bits = usize::BITS as usize - (num_classes - 1).leading_zeros() as usize;
    if dim < bits {
        return Err(Error::InvalidConfig(format!(
            "dim {dim} too small to separate {num_classes} classes (need {bits})"
        )));
    }
    if !(spread.is_finite() && spread > 0.0) {
        return Err(Error::InvalidConfig(format!("spread {spread} must be positive")));
    }
    let mean = |c: usize, d: usize| if (c >> (d % bits)) & 1 == 1 { 0.75 } else { 0.25 };
    let noise = Normal::new(0.0, spread).expect("spread validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n_per_class * num_classes);
    for _ in 0..n_per_class {
        for c in 0..num_classes {
            let pixels = (0..dim)
                .map(|d| (mean(c, d) + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
                .collect();
            items.push(LabeledVector::new(pixels, c));
        }
    }
    let mut lineage = DatasetLineage::original("synthetic-blobs");
    lineage.seed = Some(seed);
    Dataset::new(items, dim, num_classes, lineage)
}
