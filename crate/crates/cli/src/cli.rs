//! Subcommands. Every command that writes files also writes a
//! `manifest.json` into its output directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use distlab_core::analysis::{coverage_report, trainer_verdict};
use distlab_core::dataset::{
    fetch_mnist, load_idx_with_classes, resolve_base_url, ChecksumTable, Dataset,
};
use distlab_core::distortion::{generate_dataset, iterate_generation, GenerationSchedule};
use distlab_core::training::{evaluate, load_model, mean_loss, train, MutationSpec};
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig, Overrides};
use crate::manifest::{verify, ManifestBuilder, VerifyProblem, MANIFEST_FILE};
use crate::pipeline::{self, TEST_SET_ID};

/// Marks errors caused by the invocation itself (bad flags, unreadable or
/// invalid config) rather than by the pipeline.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for usage and config errors, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| c.is::<UsageError>()) {
        2
    } else {
        1
    }
}

#[derive(Debug, Parser)]
#[command(name = "distlab", version, about = "Detect faulty training programs by training on self-generated distorted data")]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Distortion trade-off weight.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Accuracy gap above which a trainer is flagged.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Never touch the network.
    #[arg(long, global = true)]
    pub offline: bool,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download and verify the MNIST archives.
    Fetch {
        /// Mirror to download from (else `DISTLAB_MNIST_URL`, else the default mirror).
        #[arg(long)]
        base_url: Option<String>,
        /// Download directory (defaults to the config's, else `data/mnist`).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Train one model on the configured training set.
    Train {
        /// Mutation operator, e.g. `SKIP_BIAS_UPDATE(1)`.
        #[arg(long, default_value = "NONE")]
        mutation: MutationSpec,
    },
    /// Generate the distorted version of a dataset with a trained model.
    Distort {
        /// Model file (`.dstw`).
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Loss and accuracy of a model on a dataset.
    Eval {
        /// Model file (`.dstw`).
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Inactive-neuron histogram of a model over a dataset.
    Coverage {
        /// Model file (`.dstw`).
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Activation threshold (defaults to the config's, else 0).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Compare the models a trainer learned from original and distorted data.
    Verdict {
        /// Model trained on the original data.
        #[arg(long)]
        model_a: PathBuf,
        /// Model trained on the distorted data.
        #[arg(long)]
        model_b: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Repeated generate/retrain rounds.
    Iterate {
        #[arg(long, default_value_t = 3)]
        rounds: usize,
        /// Mutation operator applied in every round.
        #[arg(long, default_value = "NONE")]
        mutation: MutationSpec,
    },
    /// The full pipeline for the reference trainer and the mutant pool.
    Experiment,
    /// Re-hash every artifact listed in a manifest.
    Verify {
        /// Manifest to check (defaults to `<output_dir>/manifest.json`).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

/// Dataset selection: explicit IDX files, or a split of the configured data.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Configured split to use when no files are given.
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// IDX image file (u8 or f32).
    #[arg(long, requires = "labels")]
    pub images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long, requires = "images")]
    pub labels: Option<PathBuf>,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            lambda: self.lambda,
            epsilon: self.epsilon,
            offline: self.offline,
            out: self.out.clone(),
        }
    }

    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| usage("this command needs --config"))?;
        let mut cfg = ExperimentConfig::load(path).map_err(|e| usage(format!("{e:#}")))?;
        cfg.apply_overrides(&self.overrides());
        cfg.validate().map_err(|e| usage(format!("{e:#}")))?;
        Ok(cfg)
    }

    fn optional_config(&self) -> anyhow::Result<Option<ExperimentConfig>> {
        match self.config {
            Some(_) => self.config().map(Some),
            None => Ok(None),
        }
    }

    fn out_dir(&self, cfg: Option<&ExperimentConfig>) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.map(|c| c.output_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

fn load_data(
    args: &DataArgs,
    cfg: Option<&ExperimentConfig>,
    num_classes: usize,
) -> anyhow::Result<Dataset> {
    if let (Some(images), Some(labels)) = (&args.images, &args.labels) {
        return Ok(load_idx_with_classes(images, labels, num_classes)?);
    }
    let cfg = cfg.ok_or_else(|| usage("pass --images/--labels or --config"))?;
    let (ls, ts) = cfg.load_data()?;
    Ok(match args.split {
        Split::Train => ls,
        Split::Test => ts,
    })
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Fetch { base_url, dest } => cmd_fetch(cli, base_url.as_deref(), dest.as_deref()),
        Command::Train { mutation } => cmd_train(cli, mutation),
        Command::Distort { model, data } => cmd_distort(cli, model, data),
        Command::Eval { model, data } => cmd_eval(cli, model, data),
        Command::Coverage {
            model,
            data,
            threshold,
        } => cmd_coverage(cli, model, data, *threshold),
        Command::Verdict {
            model_a,
            model_b,
            data,
        } => cmd_verdict(cli, model_a, model_b, data),
        Command::Iterate { rounds, mutation } => cmd_iterate(cli, *rounds, mutation),
        Command::Experiment => cmd_experiment(cli),
        Command::Verify { manifest } => cmd_verify(cli, manifest.as_deref()),
    }
}

fn cmd_fetch(cli: &Cli, base_url: Option<&str>, dest: Option<&Path>) -> anyhow::Result<()> {
    let cfg = cli.optional_config()?;
    let (cfg_url, cfg_dest, cfg_offline) = match cfg.as_ref().map(|c| &c.data) {
        Some(DataSource::Fetch {
            base_url,
            dest_dir,
            offline,
        }) => (base_url.clone(), Some(dest_dir.clone()), *offline),
        _ => (None, None, false),
    };
    let url = resolve_base_url(base_url.or(cfg_url.as_deref()));
    let dest = dest
        .map(Path::to_path_buf)
        .or(cfg_dest)
        .unwrap_or_else(|| PathBuf::from("data/mnist"));
    let files = fetch_mnist(&url, &dest, cli.offline || cfg_offline, &ChecksumTable::mnist())?;
    for p in [
        &files.train_images,
        &files.train_labels,
        &files.test_images,
        &files.test_labels,
    ] {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_train(cli: &Cli, mutation: &MutationSpec) -> anyhow::Result<()> {
    let cfg = cli.config()?;
    mutation.operator.validate().map_err(|e| usage(e.to_string()))?;
    let (ls, ts) = cfg.load_data()?;
    let model = train(&cfg.train, &cfg.model, &ls, &ts, mutation)?;
    let out = cli.out_dir(Some(&cfg));
    create_dir(&out)?;
    let mut manifest = ManifestBuilder::new(&out, "train");
    manifest.set_config(serde_json::to_value(&cfg)?);
    pipeline::write_model(&out, "model", &model, &mut manifest, "model")?;
    manifest.write()?;
    let last = model.metrics.last().copied();
    println!("model_id {}", model.model_id);
    if let Some(r) = last {
        println!(
            "epochs {} converged {} loss_train {:.6} acc_train {:.6} acc_test {:.6}",
            r.epoch, model.converged, r.loss_train, r.acc_train, r.acc_test
        );
    }
    Ok(())
}

fn cmd_distort(cli: &Cli, model_path: &Path, data: &DataArgs) -> anyhow::Result<()> {
    let cfg = cli.optional_config()?;
    let model = load_model(model_path)?;
    let ds = load_data(data, cfg.as_ref(), model.model_config.num_classes)?;
    let mut dcfg = cfg.as_ref().map(|c| c.distort).unwrap_or_default();
    if let Some(l) = cli.lambda {
        dcfg.lambda = l;
    }
    dcfg.validate().map_err(|e| usage(e.to_string()))?;
    let distorted = generate_dataset(&ds, &model, &dcfg)?;
    let out = cli.out_dir(cfg.as_ref());
    create_dir(&out)?;
    let mut manifest = ManifestBuilder::new(&out, "distort");
    if let Some(c) = &cfg {
        manifest.set_config(serde_json::to_value(c)?);
    }
    pipeline::write_dataset(&out, "distorted", &distorted, &mut manifest, "distorted")?;
    pipeline::write_samples(&out.join("samples"), &distorted, &mut manifest, "samples")?;
    manifest.write()?;
    println!(
        "items {} lambda {} mean_loss_before {:.6} mean_loss_after {:.6}",
        distorted.len(),
        dcfg.lambda,
        mean_loss(&model.params, &ds)?,
        mean_loss(&model.params, &distorted)?
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    model_id: String,
    items: usize,
    loss: f64,
    accuracy: f64,
}

fn cmd_eval(cli: &Cli, model_path: &Path, data: &DataArgs) -> anyhow::Result<()> {
    let cfg = cli.optional_config()?;
    let model = load_model(model_path)?;
    let ds = load_data(data, cfg.as_ref(), model.model_config.num_classes)?;
    let (loss, accuracy) = evaluate(&model.params, &ds)?;
    println!("{accuracy:.6}");
    print_json(&EvalReport {
        model_id: model.model_id,
        items: ds.len(),
        loss,
        accuracy,
    })
}

fn cmd_coverage(
    cli: &Cli,
    model_path: &Path,
    data: &DataArgs,
    threshold: Option<f64>,
) -> anyhow::Result<()> {
    let cfg = cli.optional_config()?;
    let model = load_model(model_path)?;
    let ds = load_data(data, cfg.as_ref(), model.model_config.num_classes)?;
    let threshold = threshold
        .or(cfg.as_ref().map(|c| c.coverage_threshold))
        .unwrap_or(0.0);
    let report = coverage_report(&model.params, &ds, threshold)?;
    let out = cli.out_dir(cfg.as_ref());
    create_dir(&out)?;
    let mut manifest = ManifestBuilder::new(&out, "coverage");
    let path = out.join("coverage.csv");
    fs::write(&path, report.histogram_csv())
        .with_context(|| format!("writing {}", path.display()))?;
    manifest.record("coverage", &path)?;
    manifest.write()?;
    println!(
        "mean_nc {:.6} mean_inactive {:.6}",
        report.mean_nc,
        report.mean_inactive_fraction()
    );
    Ok(())
}

fn cmd_verdict(cli: &Cli, a: &Path, b: &Path, data: &DataArgs) -> anyhow::Result<()> {
    let cfg = cli.optional_config()?;
    let w0 = load_model(a)?;
    let w1 = load_model(b)?;
    let ds = load_data(data, cfg.as_ref(), w0.model_config.num_classes)?;
    let epsilon = cli
        .epsilon
        .or(cfg.as_ref().map(|c| c.epsilon))
        .unwrap_or(distlab_core::analysis::DEFAULT_EPSILON);
    let ds_id = match (&data.images, data.split) {
        (Some(p), _) => p.display().to_string(),
        (None, Split::Test) => TEST_SET_ID.to_owned(),
        (None, Split::Train) => "ls".to_owned(),
    };
    let report = trainer_verdict(&w0, &w1, &ds, &ds_id, epsilon)?;
    let out = cli.out_dir(cfg.as_ref());
    create_dir(&out)?;
    let mut manifest = ManifestBuilder::new(&out, "verdict");
    let path = out.join("verdict.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", path.display()))?;
    manifest.record("verdict", &path)?;
    manifest.write()?;
    print_json(&report)
}

fn cmd_iterate(cli: &Cli, rounds: usize, mutation: &MutationSpec) -> anyhow::Result<()> {
    let cfg = cli.config()?;
    if rounds == 0 {
        return Err(usage("--rounds must be at least 1"));
    }
    let (ls, ts) = cfg.load_data()?;
    let sched = GenerationSchedule {
        rounds,
        distort: cfg.distort,
        train: cfg.train.clone(),
        mutation: mutation.clone(),
    };
    let outcome = iterate_generation(&ls, &ts, &cfg.model, &sched)?;
    let out = cli.out_dir(Some(&cfg));
    create_dir(&out)?;
    let mut manifest = ManifestBuilder::new(&out, "iterate");
    manifest.set_config(serde_json::to_value(&cfg)?);
    for r in &outcome.rounds {
        let stem = format!("round_{}", r.round);
        pipeline::write_model(&out, &stem, &r.model, &mut manifest, &stem)?;
    }
    let path = out.join("iterate_summary.csv");
    fs::write(&path, outcome.summary_csv())
        .with_context(|| format!("writing {}", path.display()))?;
    manifest.record("summary", &path)?;
    manifest.write()?;
    print!("{}", outcome.summary_csv());
    match outcome.k_c {
        Some(k) => {
            let a0 = outcome.rounds[0].acc_ts;
            let ak = outcome.rounds[k].acc_ts;
            println!("K_c {k} acc_ts(W0) {a0:.6} acc_ts(W_Kc) {ak:.6} holds {}", a0 >= ak);
        }
        None => println!("K_c none within {rounds} rounds"),
    }
    Ok(())
}

fn cmd_experiment(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.config()?;
    let report = pipeline::run_experiment(&cfg)?;
    println!(
        "{:<36} {:>8} {:>8} {:>8} {:>10} {:>10}  verdict",
        "trainer", "acc_w0", "acc_w1", "gap", "inact_w0", "inact_w1"
    );
    for run in &report.runs {
        let s = &run.summary;
        println!(
            "{:<36} {:>8.4} {:>8.4} {:>8.4} {:>10.4} {:>10.4}  {:?}",
            s.trainer_id,
            run.verdict.obs_a,
            run.verdict.obs_b,
            s.gap,
            s.mean_inactive_w0,
            s.mean_inactive_w1,
            s.verdict
        );
    }
    for s in &report.screen {
        if !matches!(s.verdict, distlab_core::training::ScreenVerdict::Accept) {
            println!("screened out {}: {:?}", s.trainer_id, s.verdict);
        }
    }
    for (what, why) in &report.failures {
        println!("failed {what}: {why}");
    }
    println!("manifest {}", report.manifest_path.display());
    Ok(())
}

fn cmd_verify(cli: &Cli, manifest: Option<&Path>) -> anyhow::Result<()> {
    let path = match manifest {
        Some(p) => p.to_path_buf(),
        None => {
            let cfg = cli.optional_config()?;
            cli.out_dir(cfg.as_ref()).join(MANIFEST_FILE)
        }
    };
    let problems = verify(&path)?;
    for p in &problems {
        match p {
            VerifyProblem::Missing { role, path } => println!("missing {role}: {path}"),
            VerifyProblem::Changed { role, path } => println!("changed {role}: {path}"),
        }
    }
    if problems.is_empty() {
        println!("ok {}", path.display());
        Ok(())
    } else {
        Err(anyhow!("{} artifact(s) failed verification", problems.len()))
    }
}
