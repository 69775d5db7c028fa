//! Minibatch SGD trainer with loss-delta convergence detection, per-epoch
//! metrics, and an injectable gradient fault.

mod mutation;
mod screen;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, DatasetLineage};
use crate::error::{Error, Result};
use crate::model::{
    self, cross_entropy, forward_unchecked, init_params, read_params, write_params, ModelConfig,
    Params,
};

pub use mutation::{MutationOperator, MutationSpec};
pub use screen::{screen_mutants, ScreenEntry, ScreenVerdict, SCREEN_ACC_TOLERANCE};

pub(crate) use mutation::MutationHook;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_delta_tol: f64,
    /// Consecutive epochs with `|loss_e - loss_{e-1}| < loss_delta_tol`
    /// required to declare convergence.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            batch_size: 100,
            learning_rate: 0.1,
            seed: 0,
            loss_delta_tol: 1e-3,
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::InvalidConfig(
                "max_epochs, batch_size and patience must be >= 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.loss_delta_tol.is_finite() && self.loss_delta_tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss_delta_tol {} must be positive",
                self.loss_delta_tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_train: f64,
    pub acc_train: f64,
    pub acc_test: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.rows.last()
    }

    /// `epoch,loss_train,acc_train,acc_test` with six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss_train,acc_train,acc_test\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6}",
                r.epoch, r.loss_train, r.acc_train, r.acc_test
            )
            .expect("writing to a String");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: Params,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub mutation: MutationSpec,
    pub dataset_lineage: DatasetLineage,
    pub metrics: MetricsLog,
    /// Whether training stopped on the loss-delta criterion rather than at
    /// `max_epochs`.
    pub converged: bool,
    /// SHA-256 of the serialized parameters.
    pub model_id: String,
}

/// Content hash of a parameter set, over its model-file encoding.
pub fn model_id(params: &Params) -> String {
    Sha256::digest(write_params(params))
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Sample order for one epoch: a permutation of `0..n` seeded by
/// `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn check_compatible(ds: &Dataset, mcfg: &ModelConfig, what: &'static str) -> Result<()> {
    ds.ensure_non_empty()?;
    if ds.input_dim() != mcfg.input_dim {
        return Err(Error::DimensionMismatch {
            what,
            expected: mcfg.input_dim,
            got: ds.input_dim(),
        });
    }
    if ds.num_classes() != mcfg.num_classes {
        return Err(Error::DimensionMismatch {
            what,
            expected: mcfg.num_classes,
            got: ds.num_classes(),
        });
    }
    Ok(())
}

/// Mean loss and accuracy in one pass.
pub fn evaluate(w: &Params, ds: &Dataset) -> Result<(f64, f64)> {
    check_compatible(ds, &w.config(), "evaluation dataset")?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for item in ds.items() {
        let trace = forward_unchecked(w, &item.pixels);
        loss += cross_entropy(&trace.probs, item.tag);
        if model::argmax(&trace.probs) == item.tag {
            correct += 1;
        }
    }
    let n = ds.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Fraction of items whose predicted class equals their tag.
pub fn accuracy(w: &Params, ds: &Dataset) -> Result<f64> {
    check_compatible(ds, &w.config(), "evaluation dataset")?;
    let correct = ds
        .items()
        .iter()
        .filter(|item| model::argmax(&forward_unchecked(w, &item.pixels).probs) == item.tag)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

pub fn mean_loss(w: &Params, ds: &Dataset) -> Result<f64> {
    evaluate(w, ds).map(|(loss, _)| loss)
}

fn sgd_step(params: &mut Params, grad: &Params, lr: f64) {
    for (p, g) in params.tensors_mut().into_iter().zip(grad.tensors()) {
        for (pv, gv) in p.iter_mut().zip(g) {
            *pv -= lr * gv;
        }
    }
}

/// Trains from a He-initialized start with plain minibatch SGD.
///
/// Each epoch visits `ls` in the order given by [`epoch_order`], then logs
/// the full-pass training loss and accuracy and the accuracy on `ts`.
/// Training stops once the epoch-to-epoch loss change stays below
/// `loss_delta_tol` for `patience` epochs, or after `max_epochs`. A
/// non-finite loss or parameter aborts with [`Error::Diverged`]. The final
/// parameters are rounded to `f32`, the precision they are stored at.
pub fn train(
    cfg: &TrainConfig,
    mcfg: &ModelConfig,
    ls: &Dataset,
    ts: &Dataset,
    mutation: &MutationSpec,
) -> Result<TrainedModel> {
    cfg.validate()?;
    mcfg.validate()?;
    mutation.operator.validate()?;
    check_compatible(ls, mcfg, "training dataset")?;
    check_compatible(ts, mcfg, "test dataset")?;

    let mut params = init_params(*mcfg, cfg.seed)?;
    let mut hook = MutationHook::new(mutation.operator, *mcfg);
    let mut metrics = MetricsLog::default();
    let mut step = 0usize;
    let mut calm_epochs = 0usize;
    let mut converged = false;

    for epoch in 1..=cfg.max_epochs {
        let order = epoch_order(cfg.seed, epoch, ls.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = match hook.stale_gradient(step) {
                Some(stale) => stale,
                None => {
                    let items = batch.iter().map(|&i| &ls.items()[i]);
                    let (grad, _) = model::grad_params_with_loss(&params, items)?;
                    hook.remember(&grad);
                    grad
                }
            };
            hook.apply(&mut grad);
            sgd_step(&mut params, &grad, cfg.learning_rate);
            if !params.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    what: "parameter",
                });
            }
            step += 1;
        }

        let (loss_train, acc_train) = evaluate(&params, ls)?;
        if !loss_train.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                what: "training loss",
            });
        }
        let acc_test = accuracy(&params, ts)?;
        if let Some(prev) = metrics.last() {
            if (loss_train - prev.loss_train).abs() < cfg.loss_delta_tol {
                calm_epochs += 1;
            } else {
                calm_epochs = 0;
            }
        }
        metrics.rows.push(EpochMetrics {
            epoch,
            loss_train,
            acc_train,
            acc_test,
        });
        if calm_epochs >= cfg.patience {
            converged = true;
            break;
        }
    }

    params.round_to_f32();
    if !params.is_finite() {
        return Err(Error::Diverged {
            epoch: metrics.rows.len(),
            step,
            what: "parameter beyond f32 range",
        });
    }
    Ok(TrainedModel {
        model_id: model_id(&params),
        params,
        model_config: *mcfg,
        train_config: cfg.clone(),
        mutation: mutation.clone(),
        dataset_lineage: ls.lineage().clone(),
        metrics,
        converged,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelSidecar {
    model_id: String,
    trainer_id: String,
    model_config: ModelConfig,
    seed: u64,
    train_config: TrainConfig,
    mutation: MutationSpec,
    dataset_lineage: DatasetLineage,
    converged: bool,
    metrics: MetricsLog,
}

/// `<stem>.model.json` next to a model file.
pub fn model_sidecar_path(model: &Path) -> PathBuf {
    let stem = model
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    model.with_file_name(format!("{stem}.model.json"))
}

/// Writes the parameter file and its JSON sidecar.
pub fn save_model(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_params(&model.params)).map_err(|e| Error::io(path, e))?;
    let sidecar = model_sidecar_path(path);
    let meta = ModelSidecar {
        model_id: model.model_id.clone(),
        trainer_id: model.mutation.trainer_id(),
        model_config: model.model_config,
        seed: model.train_config.seed,
        train_config: model.train_config.clone(),
        mutation: model.mutation.clone(),
        dataset_lineage: model.dataset_lineage.clone(),
        converged: model.converged,
        metrics: model.metrics.clone(),
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&sidecar, e))?;
    fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
}

/// Reads a model and its sidecar; the stored id must match the parameters.
pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = read_params(&bytes, path)?;
    let sidecar = model_sidecar_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let meta: ModelSidecar = serde_json::from_str(&text).map_err(|e| Error::json(&sidecar, e))?;
    let id = model_id(&params);
    if id != meta.model_id {
        return Err(Error::BadModelFile {
            path: path.to_path_buf(),
            reason: format!("sidecar id {} does not match parameters {id}", meta.model_id),
        });
    }
    if meta.model_config != params.config() {
        return Err(Error::BadModelFile {
            path: path.to_path_buf(),
            reason: "sidecar model_config disagrees with the parameter header".into(),
        });
    }
    Ok(TrainedModel {
        params,
        model_config: meta.model_config,
        train_config: meta.train_config,
        mutation: meta.mutation,
        dataset_lineage: meta.dataset_lineage,
        metrics: meta.metrics,
        converged: meta.converged,
        model_id: id,
    })
}
