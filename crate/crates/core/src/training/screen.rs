//! Keeps the injected faults that the accuracy oracle cannot see: mutants
//! that still converge to a test accuracy close to the reference trainer's.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, MutationSpec, TrainConfig, TrainedModel};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Largest final test-accuracy gap to the reference that still counts as
/// "looks healthy".
pub const SCREEN_ACC_TOLERANCE: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScreenVerdict {
    Accept,
    Reject,
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct ScreenEntry {
    pub mutation: MutationSpec,
    pub model: Option<TrainedModel>,
    /// `|acc_test(mutant) - acc_test(reference)|` at the last epoch.
    pub acc_gap: Option<f64>,
    pub verdict: ScreenVerdict,
}

fn final_acc_test(m: &TrainedModel) -> f64 {
    m.metrics.last().map(|r| r.acc_test).unwrap_or(0.0)
}

/// Trains every candidate with identical configs and seeds. A candidate is
/// accepted iff it converged and its final test accuracy is within
/// [`SCREEN_ACC_TOLERANCE`] of the unmutated baseline. Failures of
/// individual candidates are recorded, not propagated; only a failing
/// baseline is an error.
pub fn screen_mutants(
    candidates: &[MutationSpec],
    cfg: &TrainConfig,
    mcfg: &ModelConfig,
    ls: &Dataset,
    ts: &Dataset,
) -> Result<Vec<ScreenEntry>> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("mutant screen needs candidates".into()));
    }
    let baseline = train(cfg, mcfg, ls, ts, &MutationSpec::none())?;
    let base_acc = final_acc_test(&baseline);

    Ok(candidates
        .par_iter()
        .map(|spec| {
            let trained = if spec.is_none() {
                Ok(baseline.clone())
            } else {
                train(cfg, mcfg, ls, ts, spec)
            };
            match trained {
                Ok(model) => {
                    let gap = (final_acc_test(&model) - base_acc).abs();
                    // The reference is compared with itself, so it always passes.
                    let passes = spec.is_none() || (model.converged && gap <= SCREEN_ACC_TOLERANCE);
                    let verdict = if passes {
                        ScreenVerdict::Accept
                    } else {
                        ScreenVerdict::Reject
                    };
                    ScreenEntry {
                        mutation: spec.clone(),
                        model: Some(model),
                        acc_gap: Some(gap),
                        verdict,
                    }
                }
                Err(e) => ScreenEntry {
                    mutation: spec.clone(),
                    model: None,
                    acc_gap: None,
                    verdict: ScreenVerdict::Failed(e.to_string()),
                },
            }
        })
        .collect())
}
