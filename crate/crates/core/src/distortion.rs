//! Distorted-dataset generation. Each example is replaced by a minimizer of
//!
//! ```text
//! A(x) = cross_entropy(y(W; x), t) + lambda * |x - x_seed|^2
//! ```
//!
//! found by projected gradient descent inside a pixel box, starting at the
//! seed. With `t` equal to the seed's own tag the result is not adversarial:
//! it is the seed pushed towards whatever the model already finds most
//! typical of its class, by an amount governed by `lambda`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabeledVector};
use crate::error::{Error, Result};
use crate::model::{self, cross_entropy, forward_unchecked, input_distance, ModelConfig, Params};
use crate::training::{accuracy, mean_loss, train, MutationSpec, TrainConfig, TrainedModel};

/// Smallest backtracking step before the descent is declared stalled.
const MIN_STEP: f64 = 1e-12;

/// Round-to-round test-accuracy change below which generation has stabilized.
pub const STABILIZATION_DELTA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DistortMode {
    /// Target each seed's own tag.
    SameLabel,
    /// Target a fixed class.
    Targeted { target: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistortConfig {
    pub lambda: f64,
    pub max_steps: usize,
    pub step_size: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub grad_norm_tol: f64,
    pub mode: DistortMode,
}

impl Default for DistortConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            max_steps: 100,
            step_size: 0.1,
            clip_lo: 0.0,
            clip_hi: 1.0,
            grad_norm_tol: 1e-4,
            mode: DistortMode::SameLabel,
        }
    }
}

impl DistortConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1".into());
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad(format!("step_size {} must be positive", self.step_size));
        }
        if !(self.clip_lo < self.clip_hi) {
            return bad(format!(
                "clip range [{}, {}] is empty",
                self.clip_lo, self.clip_hi
            ));
        }
        if !(self.grad_norm_tol.is_finite() && self.grad_norm_tol > 0.0) {
            return bad(format!("grad_norm_tol {} must be positive", self.grad_norm_tol));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortTrace {
    /// Accepted descent steps.
    pub steps: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub final_loss_term: f64,
    pub final_dist_term: f64,
}

fn check_target(w: &Params, target: usize) -> Result<()> {
    let c = w.config().num_classes;
    if target >= c {
        return Err(Error::DimensionMismatch {
            what: "target class",
            expected: c,
            got: target,
        });
    }
    Ok(())
}

/// Returns `(loss term, distance term)` of the objective.
fn objective_terms<A, B>(w: &Params, x: &[A], x_s: &[B], target: usize, lambda: f64) -> (f64, f64)
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    let loss = cross_entropy(&forward_unchecked(w, x).probs, target);
    let dist = input_distance(x, x_s).expect("lengths checked by caller");
    (loss, lambda * dist)
}

/// `cross_entropy(forward(w, x).probs, target) + lambda * input_distance(x, x_s)`.
pub fn objective<A, B>(w: &Params, x: &[A], x_s: &[B], target: usize, lambda: f64) -> Result<f64>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    model::forward(w, x)?;
    input_distance(x, x_s)?;
    check_target(w, target)?;
    let (l, d) = objective_terms(w, x, x_s, target, lambda);
    Ok(l + d)
}

/// Projected gradient descent on the objective from `x = seed`.
///
/// Each iteration tries `x - step * grad`, clipped to the box, starting at
/// `cfg.step_size` and halving until the objective strictly decreases. It
/// stops after `max_steps` accepted steps, when the projected gradient norm
/// drops below `grad_norm_tol`, or when no step down to 1e-12 decreases the
/// objective. The returned point therefore never scores worse than the seed.
pub fn distort_one<T: Copy + Into<f64>>(
    w: &Params,
    seed: &[T],
    target: usize,
    cfg: &DistortConfig,
) -> Result<(Vec<f64>, DistortTrace)> {
    cfg.validate()?;
    model::forward(w, seed)?;
    check_target(w, target)?;
    let seed: Vec<f64> = seed.iter().map(|&v| v.into()).collect();
    if let Some(v) = seed.iter().find(|v| !(cfg.clip_lo..=cfg.clip_hi).contains(*v)) {
        return Err(Error::InvalidConfig(format!(
            "seed value {v} lies outside [{}, {}]",
            cfg.clip_lo, cfg.clip_hi
        )));
    }
    Ok(descend(w, &seed, target, cfg)?)
}

fn descend(
    w: &Params,
    seed: &[f64],
    target: usize,
    cfg: &DistortConfig,
) -> Result<(Vec<f64>, DistortTrace)> {
    let (lo, hi) = (cfg.clip_lo, cfg.clip_hi);
    let mut x = seed.to_vec();
    let (mut loss, mut dist) = objective_terms(w, &x, seed, target, cfg.lambda);
    let initial_objective = loss + dist;
    let mut candidate = vec![0.0; x.len()];
    let mut steps = 0;

    while steps < cfg.max_steps {
        let g = model::grad_input_unchecked(w, &x, target, seed, cfg.lambda);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { step: steps });
        }
        // Components pinned at a bound with the gradient pushing outward
        // cannot move and do not count towards stationarity.
        let projected_norm = x
            .iter()
            .zip(&g)
            .filter(|&(&xi, &gi)| !((xi <= lo && gi > 0.0) || (xi >= hi && gi < 0.0)))
            .map(|(_, gi)| gi * gi)
            .sum::<f64>()
            .sqrt();
        if projected_norm < cfg.grad_norm_tol {
            break;
        }

        let current = loss + dist;
        let mut step = cfg.step_size;
        let accepted = loop {
            for ((c, &xi), &gi) in candidate.iter_mut().zip(&x).zip(&g) {
                *c = (xi - step * gi).clamp(lo, hi);
            }
            let (l, d) = objective_terms(w, &candidate, seed, target, cfg.lambda);
            if l + d < current {
                break Some((l, d));
            }
            step *= 0.5;
            if step < MIN_STEP {
                break None;
            }
        };
        match accepted {
            Some((l, d)) => {
                std::mem::swap(&mut x, &mut candidate);
                loss = l;
                dist = d;
                steps += 1;
            }
            None => break,
        }
    }

    Ok((
        x,
        DistortTrace {
            steps,
            initial_objective,
            final_objective: loss + dist,
            final_loss_term: loss,
            final_dist_term: dist,
        },
    ))
}

/// Replaces every item of `ds` by its same-label distortion under `model`.
/// Tags and order are preserved; the lineage generation is incremented and
/// records the generating model and `lambda`.
pub fn generate_dataset(ds: &Dataset, model: &TrainedModel, cfg: &DistortConfig) -> Result<Dataset> {
    cfg.validate()?;
    if cfg.mode != DistortMode::SameLabel {
        return Err(Error::InvalidConfig(
            "dataset generation requires SAME_LABEL mode".into(),
        ));
    }
    if cfg.clip_lo < 0.0 || cfg.clip_hi > 1.0 {
        return Err(Error::InvalidConfig(
            "generated pixels must stay within [0, 1]".into(),
        ));
    }
    ds.ensure_non_empty()?;
    let mcfg: ModelConfig = model.params.config();
    if ds.input_dim() != mcfg.input_dim || ds.num_classes() != mcfg.num_classes {
        return Err(Error::DimensionMismatch {
            what: "dataset vs generator model",
            expected: mcfg.input_dim,
            got: ds.input_dim(),
        });
    }
    let items = ds
        .items()
        .par_iter()
        .enumerate()
        .map(|(index, item)| {
            let seed: Vec<f64> = item.pixels.iter().map(|&p| p as f64).collect();
            let (x, _) = descend(&model.params, &seed, item.tag, cfg).map_err(|e| {
                Error::ItemFailed {
                    index,
                    source: Box::new(e),
                }
            })?;
            let pixels = x.into_iter().map(|v| v as f32).collect();
            Ok(LabeledVector::new(pixels, item.tag))
        })
        .collect::<Result<Vec<_>>>()?;
    let lineage = ds.lineage().derived(model.model_id.clone(), cfg.lambda);
    Dataset::new(items, ds.input_dim(), ds.num_classes(), lineage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSchedule {
    pub rounds: usize,
    pub distort: DistortConfig,
    pub train: TrainConfig,
    pub mutation: MutationSpec,
}

#[derive(Debug, Clone)]
pub struct GenerationRound {
    pub round: usize,
    pub dataset: Dataset,
    pub model: TrainedModel,
    /// Accuracy of this round's model on the fixed test set.
    pub acc_ts: f64,
    /// Accuracy of this round's model on its own training set.
    pub acc_self: f64,
    /// Mean loss of the previous round's model on this round's dataset.
    pub mean_loss_prev_model: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub rounds: Vec<GenerationRound>,
    /// First round `k >= 1` whose test accuracy moved by less than
    /// [`STABILIZATION_DELTA`] from round `k - 1`.
    pub k_c: Option<usize>,
}

impl IterationOutcome {
    /// `round,acc_ts,acc_self,mean_loss_prev_model,K_c_flag`; the previous-model
    /// loss is empty for round 0.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("round,acc_ts,acc_self,mean_loss_prev_model,K_c_flag\n");
        for r in &self.rounds {
            let prev = r
                .mean_loss_prev_model
                .map(|l| format!("{l:.6}"))
                .unwrap_or_default();
            let flag = u8::from(self.k_c == Some(r.round));
            writeln!(
                out,
                "{},{:.6},{:.6},{},{}",
                r.round, r.acc_ts, r.acc_self, prev, flag
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Alternates training and generation for `sched.rounds` rounds:
/// `W0 = train(LS0)`, then `LS_k = generate(LS_{k-1}, W_{k-1})` and
/// `W_k = train(LS_k)`.
pub fn iterate_generation(
    ls0: &Dataset,
    ts: &Dataset,
    mcfg: &ModelConfig,
    sched: &GenerationSchedule,
) -> Result<IterationOutcome> {
    if sched.rounds == 0 {
        return Err(Error::InvalidConfig("generation needs at least one round".into()));
    }
    let tag = |round: usize| move |e: Error| Error::RoundFailed {
        round,
        source: Box::new(e),
    };
    let model0 = train(&sched.train, mcfg, ls0, ts, &sched.mutation).map_err(tag(0))?;
    let mut rounds = vec![GenerationRound {
        round: 0,
        acc_ts: accuracy(&model0.params, ts).map_err(tag(0))?,
        acc_self: accuracy(&model0.params, ls0).map_err(tag(0))?,
        dataset: ls0.clone(),
        model: model0,
        mean_loss_prev_model: None,
    }];
    let mut k_c = None;
    for k in 1..=sched.rounds {
        let prev = rounds.last().expect("round 0 present");
        let dataset = generate_dataset(&prev.dataset, &prev.model, &sched.distort).map_err(tag(k))?;
        let loss_prev = mean_loss(&prev.model.params, &dataset).map_err(tag(k))?;
        let model = train(&sched.train, mcfg, &dataset, ts, &sched.mutation).map_err(tag(k))?;
        let acc_ts = accuracy(&model.params, ts).map_err(tag(k))?;
        let acc_self = accuracy(&model.params, &dataset).map_err(tag(k))?;
        if k_c.is_none() && (acc_ts - prev.acc_ts).abs() < STABILIZATION_DELTA {
            k_c = Some(k);
        }
        rounds.push(GenerationRound {
            round: k,
            dataset,
            model,
            acc_ts,
            acc_self,
            mean_loss_prev_model: Some(loss_prev),
        });
    }
    Ok(IterationOutcome { rounds, k_c })
}
