//! The end-to-end experiment: for the reference trainer and every mutant,
//! train on the original data, generate distorted training and test sets
//! with that model, retrain on the distorted training set, and compare.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use distlab_core::analysis::{coverage_report, trainer_verdict, CoverageReport, VerdictReport};
use distlab_core::dataset::{save_idx, Dataset};
use distlab_core::distortion::generate_dataset;
use distlab_core::training::{
    accuracy, mean_loss, save_model, screen_mutants, train, MutationSpec, ScreenVerdict,
    TrainedModel,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::manifest::{Manifest, ManifestBuilder};
use crate::pgm;

pub const TEST_SET_ID: &str = "ts";
const SAMPLE_COUNT: usize = 25;

/// Everything one trainer's pass through the pipeline produced.
#[derive(Debug, Clone)]
pub struct TrainerRun {
    pub mutation: MutationSpec,
    pub w0: TrainedModel,
    pub w1: TrainedModel,
    pub ls1: Dataset,
    pub ts1: Dataset,
    pub verdict: VerdictReport,
    pub coverage_w0: CoverageReport,
    pub coverage_w1: CoverageReport,
    pub summary: TrainerSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub epochs: usize,
    pub converged: bool,
    pub acc_train: f64,
    pub acc_test: f64,
    pub loss_train: f64,
}

impl ModelSummary {
    fn of(m: &TrainedModel) -> Self {
        let last = m.metrics.last();
        Self {
            model_id: m.model_id.clone(),
            epochs: last.map_or(0, |r| r.epoch),
            converged: m.converged,
            acc_train: last.map_or(f64::NAN, |r| r.acc_train),
            acc_test: last.map_or(f64::NAN, |r| r.acc_test),
            loss_train: last.map_or(f64::NAN, |r| r.loss_train),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerSummary {
    pub trainer_id: String,
    pub w0: ModelSummary,
    pub w1: ModelSummary,
    pub mean_loss_w0_ls0: f64,
    pub mean_loss_w0_ls1: f64,
    pub acc_w1_ls1: f64,
    pub acc_w1_ts1: f64,
    pub gap: f64,
    pub verdict: distlab_core::analysis::TrainerVerdict,
    pub mean_inactive_w0: f64,
    pub mean_inactive_w1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScreenSummary {
    pub trainer_id: String,
    pub verdict: ScreenVerdict,
    pub acc_gap: Option<f64>,
    pub converged: Option<bool>,
    pub acc_test: Option<f64>,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub screen: Vec<ScreenSummary>,
    pub runs: Vec<TrainerRun>,
    pub failures: BTreeMap<String, String>,
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
}

impl ExperimentReport {
    pub fn reference(&self) -> Option<&TrainerRun> {
        self.runs.iter().find(|r| r.mutation.is_none())
    }

    pub fn mutants(&self) -> impl Iterator<Item = &TrainerRun> {
        self.runs.iter().filter(|r| !r.mutation.is_none())
    }
}

/// Directory-safe name for a trainer, e.g. `scale_gradient_1_5`.
pub fn trainer_dir_name(m: &MutationSpec) -> String {
    let mut name: String = m
        .trainer_id()
        .to_ascii_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    while name.contains("__") {
        name = name.replace("__", "_");
    }
    name.trim_matches('_').to_string()
}

/// Runs one trainer through the pipeline. `w0` may be supplied when it was
/// already trained (by the mutant screen) with the same configuration.
pub fn run_trainer(
    cfg: &ExperimentConfig,
    ls: &Dataset,
    ts: &Dataset,
    mutation: &MutationSpec,
    w0: Option<TrainedModel>,
) -> anyhow::Result<TrainerRun> {
    let id = mutation.trainer_id();
    let w0 = match w0 {
        Some(m) => m,
        None => train(&cfg.train, &cfg.model, ls, ts, mutation)
            .with_context(|| format!("{id}: training on the original data"))?,
    };
    let ls1 = generate_dataset(ls, &w0, &cfg.distort)
        .with_context(|| format!("{id}: distorting the training set"))?;
    let ts1 = generate_dataset(ts, &w0, &cfg.distort)
        .with_context(|| format!("{id}: distorting the test set"))?;
    let w1 = train(&cfg.train, &cfg.model, &ls1, ts, mutation)
        .with_context(|| format!("{id}: training on the distorted data"))?;
    let verdict = trainer_verdict(&w0, &w1, ts, TEST_SET_ID, cfg.epsilon)?;
    let coverage_w0 = coverage_report(&w0.params, ts, cfg.coverage_threshold)?;
    let coverage_w1 = coverage_report(&w1.params, ts, cfg.coverage_threshold)?;
    let summary = TrainerSummary {
        trainer_id: id,
        w0: ModelSummary::of(&w0),
        w1: ModelSummary::of(&w1),
        mean_loss_w0_ls0: mean_loss(&w0.params, ls)?,
        mean_loss_w0_ls1: mean_loss(&w0.params, &ls1)?,
        acc_w1_ls1: accuracy(&w1.params, &ls1)?,
        acc_w1_ts1: accuracy(&w1.params, &ts1)?,
        gap: verdict.gap,
        verdict: verdict.verdict,
        mean_inactive_w0: coverage_w0.mean_inactive_fraction(),
        mean_inactive_w1: coverage_w1.mean_inactive_fraction(),
    };
    Ok(TrainerRun {
        mutation: mutation.clone(),
        w0,
        w1,
        ls1,
        ts1,
        verdict,
        coverage_w0,
        coverage_w1,
        summary,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes a trained model (parameters, sidecar, metrics CSV) as `<stem>.*`.
pub fn write_model(
    dir: &Path,
    stem: &str,
    model: &TrainedModel,
    manifest: &mut ManifestBuilder,
    role: &str,
) -> anyhow::Result<()> {
    let path = dir.join(format!("{stem}.dstw"));
    save_model(model, &path)?;
    manifest.record(format!("{role}/model"), &path)?;
    manifest.record(
        format!("{role}/sidecar"),
        &distlab_core::training::model_sidecar_path(&path),
    )?;
    let csv = dir.join(format!("{stem}_metrics.csv"));
    write_text(&csv, &model.metrics.to_csv())?;
    manifest.record(format!("{role}/metrics"), &csv)
}

/// Writes a dataset as float IDX plus lineage sidecar.
pub fn write_dataset(
    dir: &Path,
    stem: &str,
    ds: &Dataset,
    manifest: &mut ManifestBuilder,
    role: &str,
) -> anyhow::Result<()> {
    let images = dir.join(format!("{stem}-images.idx"));
    let labels = dir.join(format!("{stem}-labels.idx"));
    save_idx(ds, &images, &labels)?;
    manifest.record(format!("{role}/images"), &images)?;
    manifest.record(format!("{role}/labels"), &labels)?;
    manifest.record(
        format!("{role}/lineage"),
        &distlab_core::dataset::lineage_sidecar_path(&images),
    )
}

/// The first 25 items as individual PGMs plus a 5x5 grid. Only square
/// inputs can be drawn; other shapes are skipped.
pub fn write_samples(
    dir: &Path,
    ds: &Dataset,
    manifest: &mut ManifestBuilder,
    role: &str,
) -> anyhow::Result<()> {
    let side = (ds.input_dim() as f64).sqrt().round() as usize;
    if side * side != ds.input_dim() {
        return Ok(());
    }
    fs::create_dir_all(dir)?;
    let items: Vec<&[f32]> = ds
        .items()
        .iter()
        .take(SAMPLE_COUNT)
        .map(|i| i.pixels.as_slice())
        .collect();
    for (n, px) in items.iter().enumerate() {
        let path = dir.join(format!("sample_{n:02}.pgm"));
        pgm::write(&path, px, side, side)?;
        manifest.record(format!("{role}/sample_{n:02}"), &path)?;
    }
    let (canvas, w, h) = pgm::grid(&items, side, 5, 5);
    let path = dir.join("grid.pgm");
    pgm::write(&path, &canvas, w, h)?;
    manifest.record(format!("{role}/grid"), &path)
}

fn write_trainer_outputs(
    run: &TrainerRun,
    root: &Path,
    manifest: &mut ManifestBuilder,
) -> anyhow::Result<()> {
    let name = trainer_dir_name(&run.mutation);
    let dir = root.join(&name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_model(&dir, "w0", &run.w0, manifest, &format!("{name}/w0"))?;
    write_model(&dir, "w1", &run.w1, manifest, &format!("{name}/w1"))?;
    write_dataset(&dir, "ls1", &run.ls1, manifest, &format!("{name}/ls1"))?;
    write_dataset(&dir, "ts1", &run.ts1, manifest, &format!("{name}/ts1"))?;
    write_samples(&dir.join("ls1_samples"), &run.ls1, manifest, &format!("{name}/ls1_samples"))?;
    for (stem, cov) in [("coverage_w0", &run.coverage_w0), ("coverage_w1", &run.coverage_w1)] {
        let path = dir.join(format!("{stem}.csv"));
        write_text(&path, &cov.histogram_csv())?;
        manifest.record(format!("{name}/{stem}"), &path)?;
    }
    let verdict = dir.join("verdict.json");
    write_json(&verdict, &run.verdict)?;
    manifest.record(format!("{name}/verdict"), &verdict)?;
    let summary = dir.join("summary.json");
    write_json(&summary, &run.summary)?;
    manifest.record(format!("{name}/summary"), &summary)
}

/// Runs the whole experiment and writes the report bundle under
/// `cfg.output_dir`. Mutant failures are recorded in the manifest and the
/// run continues; a failure of the reference trainer is an error.
pub fn run_experiment(cfg: &ExperimentConfig) -> anyhow::Result<ExperimentReport> {
    let (ls, ts) = cfg.load_data()?;
    run_experiment_on(cfg, &ls, &ts)
}

pub fn run_experiment_on(
    cfg: &ExperimentConfig,
    ls: &Dataset,
    ts: &Dataset,
) -> anyhow::Result<ExperimentReport> {
    let root = cfg.output_dir.clone();
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let mut manifest = ManifestBuilder::new(&root, "experiment");
    manifest.set_config(serde_json::to_value(cfg)?);

    let reference = MutationSpec::none();
    let pool: Vec<MutationSpec> = cfg
        .mutation_pool
        .iter()
        .filter(|m| !m.is_none())
        .cloned()
        .collect();

    // (mutation, pre-trained W0) pairs that go through the pipeline.
    let mut queue: Vec<(MutationSpec, Option<TrainedModel>)> = Vec::new();
    let mut screen = Vec::new();
    if cfg.screen_pool && !pool.is_empty() {
        let mut candidates = vec![reference.clone()];
        candidates.extend(pool.iter().cloned());
        let entries = screen_mutants(&candidates, &cfg.train, &cfg.model, ls, ts)
            .context("reference trainer failed during the mutant screen")?;
        for e in entries {
            screen.push(ScreenSummary {
                trainer_id: e.mutation.trainer_id(),
                verdict: e.verdict.clone(),
                acc_gap: e.acc_gap,
                converged: e.model.as_ref().map(|m| m.converged),
                acc_test: e
                    .model
                    .as_ref()
                    .and_then(|m| m.metrics.last())
                    .map(|r| r.acc_test),
            });
            if e.mutation.is_none() || e.verdict == ScreenVerdict::Accept {
                queue.push((e.mutation, e.model));
            }
        }
        let path = root.join("screen.json");
        write_json(&path, &screen)?;
        manifest.record("screen", &path)?;
    } else {
        queue.push((reference, None));
        queue.extend(pool.into_iter().map(|m| (m, None)));
    }

    let mut runs = Vec::new();
    for (mutation, w0) in queue {
        let id = mutation.trainer_id();
        let outcome = run_trainer(cfg, ls, ts, &mutation, w0)
            .and_then(|run| write_trainer_outputs(&run, &root, &mut manifest).map(|_| run));
        match outcome {
            Ok(run) => runs.push(run),
            Err(e) if mutation.is_none() => {
                return Err(e.context("reference trainer failed"));
            }
            Err(e) => manifest.fail(id, &e),
        }
    }
    if !runs.iter().any(|r| r.mutation.is_none()) {
        bail!("reference trainer produced no result");
    }

    let summaries: Vec<&TrainerSummary> = runs.iter().map(|r| &r.summary).collect();
    let path = root.join("verdicts.json");
    write_json(&path, &summaries)?;
    manifest.record("verdicts", &path)?;

    let failures = manifest.failures().clone();
    let (manifest_path, manifest) = manifest.write()?;
    Ok(ExperimentReport {
        screen,
        runs,
        failures,
        manifest_path,
        manifest,
    })
}
