//! Observer functions, the thresholded distortion relation between two
//! trained models, the resulting trainer verdict, and hidden-layer neuron
//! coverage.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, Params};
use crate::training::{accuracy, TrainedModel};

pub const DEFAULT_EPSILON: f64 = 0.2;
pub const DEFAULT_BIN_WIDTH: f64 = 0.05;

/// Named datasets an observer can refer to.
#[derive(Debug, Default, Clone)]
pub struct DatasetRegistry(BTreeMap<String, Dataset>);

impl DatasetRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, ds: Dataset) {
        self.0.insert(id.into(), ds);
    }

    pub fn get(&self, id: &str) -> Result<&Dataset> {
        self.0
            .get(id)
            .ok_or_else(|| Error::UnknownDataset(id.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "dataset", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ObserverKind {
    AccuracyOn(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observer {
    pub kind: ObserverKind,
    pub epsilon: f64,
}

impl Observer {
    pub fn accuracy_on(dataset: impl Into<String>, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon {epsilon} must be > 0")));
        }
        Ok(Self {
            kind: ObserverKind::AccuracyOn(dataset.into()),
            epsilon,
        })
    }

    pub fn dataset_id(&self) -> &str {
        match &self.kind {
            ObserverKind::AccuracyOn(id) => id,
        }
    }
}

pub fn observe(w: &Params, obs: &Observer, datasets: &DatasetRegistry) -> Result<f64> {
    match &obs.kind {
        ObserverKind::AccuracyOn(id) => accuracy(w, datasets.get(id)?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RelationOutcome {
    ApproxEqual,
    Distorted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationVerdict {
    pub obs_a: f64,
    pub obs_b: f64,
    pub gap: f64,
    pub epsilon: f64,
    pub outcome: RelationOutcome,
}

impl RelationVerdict {
    fn from_observations(obs_a: f64, obs_b: f64, epsilon: f64) -> Self {
        let gap = (obs_a - obs_b).abs();
        let outcome = if gap > epsilon {
            RelationOutcome::Distorted
        } else {
            RelationOutcome::ApproxEqual
        };
        Self {
            obs_a,
            obs_b,
            gap,
            epsilon,
            outcome,
        }
    }
}

/// Observes both models and classifies their gap against `obs.epsilon`:
/// `DISTORTED` iff `|obs(a) - obs(b)| > epsilon`.
pub fn relate(
    w_a: &Params,
    w_b: &Params,
    obs: &Observer,
    datasets: &DatasetRegistry,
) -> Result<RelationVerdict> {
    let (ca, cb) = (w_a.config(), w_b.config());
    if ca != cb {
        return Err(Error::InvalidConfig(format!(
            "cannot relate models of different shapes {ca:?} and {cb:?}"
        )));
    }
    let a = observe(w_a, obs, datasets)?;
    let b = observe(w_b, obs, datasets)?;
    Ok(RelationVerdict::from_observations(a, b, obs.epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainerVerdict {
    Clean,
    SuspectFaulty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub verdict: TrainerVerdict,
    pub obs_a: f64,
    pub obs_b: f64,
    pub gap: f64,
    pub epsilon: f64,
    pub outcome: RelationOutcome,
    pub model_ids: [String; 2],
    pub dataset_ids: Vec<String>,
}

/// A trainer is suspect when the model it learns from its own distorted
/// data (`w1`) is distorted, in test accuracy, relative to the model it
/// learned from the original data (`w0`).
pub fn trainer_verdict(
    w0: &TrainedModel,
    w1: &TrainedModel,
    ts: &Dataset,
    ts_id: &str,
    epsilon: f64,
) -> Result<VerdictReport> {
    let obs = Observer::accuracy_on(ts_id, epsilon)?;
    let mut reg = DatasetRegistry::new();
    reg.insert(ts_id, ts.clone());
    let rel = relate(&w0.params, &w1.params, &obs, &reg)?;
    let verdict = match rel.outcome {
        RelationOutcome::Distorted => TrainerVerdict::SuspectFaulty,
        RelationOutcome::ApproxEqual => TrainerVerdict::Clean,
    };
    Ok(VerdictReport {
        verdict,
        obs_a: rel.obs_a,
        obs_b: rel.obs_b,
        gap: rel.gap,
        epsilon,
        outcome: rel.outcome,
        model_ids: [w0.model_id.clone(), w1.model_id.clone()],
        dataset_ids: vec![ts_id.to_owned()],
    })
}

/// Fraction of hidden units whose ReLU output strictly exceeds `threshold`,
/// and the per-unit activation mask.
pub fn neuron_coverage<T: Copy + Into<f64>>(
    w: &Params,
    x: &[T],
    threshold: f64,
) -> Result<(f64, Vec<bool>)> {
    if !threshold.is_finite() {
        return Err(Error::InvalidConfig(format!("threshold {threshold} must be finite")));
    }
    let trace = model::forward(w, x)?;
    let mask: Vec<bool> = trace.a1.iter().map(|&a| a > threshold).collect();
    let active = mask.iter().filter(|&&m| m).count();
    Ok((active as f64 / mask.len() as f64, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub activation_threshold: f64,
    pub per_input_inactive_fraction: Vec<f64>,
    pub histogram: Vec<HistogramBin>,
    pub mean_nc: f64,
}

impl CoverageReport {
    pub fn mean_inactive_fraction(&self) -> f64 {
        1.0 - self.mean_nc
    }

    /// `bin_lo,bin_hi,count`.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for b in &self.histogram {
            writeln!(out, "{:.2},{:.2},{}", b.lo, b.hi, b.count).expect("writing to a String");
        }
        out
    }
}

/// Bins `values` in `[0, 1]` into bins of `width`; the last bin is closed.
fn histogram(values: &[f64], width: f64) -> Vec<HistogramBin> {
    let nbins = (1.0 / width).round().max(1.0) as usize;
    let mut counts = vec![0usize; nbins];
    for &v in values {
        // The nudge keeps exact multiples of the width (0.15 / 0.05) in the
        // upper bin despite rounding.
        let idx = ((v * nbins as f64) + 1e-9).floor() as usize;
        counts[idx.min(nbins - 1)] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: i as f64 / nbins as f64,
            hi: (i + 1) as f64 / nbins as f64,
            count,
        })
        .collect()
}

pub fn coverage_report(w: &Params, ds: &Dataset, threshold: f64) -> Result<CoverageReport> {
    coverage_report_with_bins(w, ds, threshold, DEFAULT_BIN_WIDTH)
}

/// Inactive-neuron fraction `1 - NC` for every input, its histogram, and
/// the mean coverage.
pub fn coverage_report_with_bins(
    w: &Params,
    ds: &Dataset,
    threshold: f64,
    bin_width: f64,
) -> Result<CoverageReport> {
    ds.ensure_non_empty()?;
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(Error::InvalidConfig(format!("bin width {bin_width} must lie in (0, 1]")));
    }
    let inactive = ds
        .items()
        .par_iter()
        .map(|item| neuron_coverage(w, &item.pixels, threshold).map(|(nc, _)| 1.0 - nc))
        .collect::<Result<Vec<f64>>>()?;
    let mean_inactive = inactive.iter().sum::<f64>() / inactive.len() as f64;
    Ok(CoverageReport {
        activation_threshold: threshold,
        histogram: histogram(&inactive, bin_width),
        per_input_inactive_fraction: inactive,
        mean_nc: 1.0 - mean_inactive,
    })
}
